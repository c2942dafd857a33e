//! Dense numerical core: row-major tensors up to rank 3, matrix products with
//! a fixed reduction order, stabilized softmax, layer normalization, GELU,
//! ordinary least squares, and a central-difference gradient oracle.
//!
//! Everything here is 64-bit; a separate `f32` fast path for benchmarking
//! lives in the attention module.

use rand::Rng;

use crate::error::{Error, Result};
use crate::track::tracker;

/// Dense row-major tensor of `f64`, rank 1 to 3.
///
/// Buffers register with the global allocation tracker when it is enabled, so
/// profiled runs can report a live-byte high-water mark.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    tracked: bool,
}

impl Tensor {
    fn register(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let tracked = tracker().acquire(data.len() * std::mem::size_of::<f64>());
        Tensor {
            shape,
            data,
            tracked,
        }
    }

    fn check_shape(shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Argument(format!(
                "tensor rank must be 1..=3, got shape {shape:?}"
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!(
                "tensor dimensions must be positive, got shape {shape:?}"
            )));
        }
        Ok(())
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Self::check_shape(shape)?;
        let len: usize = shape.iter().product();
        Ok(Self::register(shape.to_vec(), vec![0.0; len]))
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Self::check_shape(shape)?;
        let len: usize = shape.iter().product();
        Ok(Self::register(shape.to_vec(), vec![value; len]))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::check_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::register(shape.to_vec(), data))
    }

    /// Gaussian init, mean 0, the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Tensor> {
        Self::check_shape(shape)?;
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        // Box-Muller on the seeded stream keeps runs reproducible across platforms.
        for _ in 0..len {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            data.push(z * std);
        }
        Ok(Self::register(shape.to_vec(), data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as a 2-D matrix (rank-1 tensors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => self.shape[0] * self.shape[1],
        }
    }

    /// Length of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    /// Copy of rows `[start, end)` as a new 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        let data = self.data[start * c..end * c].to_vec();
        Self::register(vec![end - start, c], data)
    }

    pub fn copy_rows_from(&mut self, start: usize, src: &Tensor) {
        let c = self.cols();
        debug_assert_eq!(c, src.cols());
        self.data[start * c..start * c + src.len()].copy_from_slice(&src.data);
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Argument("transpose2 requires rank 2".into()));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::register(vec![n, m], out))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self::register(self.shape.clone(), data))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::register(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        if self.tracked {
            tracker().release(self.data.len() * std::mem::size_of::<f64>());
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Matrix product with a fixed left-to-right reduction over the inner
/// dimension, so repeated runs are bit-identical.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, p) = (a.shape()[0], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, p])?;
    // i-k-j loop order: each output element accumulates over k in increasing
    // order, and the inner loop runs over contiguous rows of `b` and `out`.
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(kk);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::Shape {
            op: "matmul_bt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, n) = (a.shape()[0], b.shape()[0]);
    let mut out = Tensor::zeros(&[m, n])?;
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    }
    Ok(out)
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::Shape {
            op: "matmul_at",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (k, m, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, p])?;
    for kk in 0..k {
        let a_row = a.row(kk);
        let b_row = b.row(kk);
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = out.row_mut(i);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
///
/// Entries of `-inf` get probability exactly 0; a row of all `-inf` is an
/// error (it cannot occur for permutation block masks).
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    softmax_rows_inplace(&mut out)?;
    Ok(out)
}

pub fn softmax_rows_inplace(x: &mut Tensor) -> Result<()> {
    let rows = x.rows();
    for i in 0..rows {
        let row = x.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            // exp(-inf - max) = 0 exactly, no large-negative approximation.
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

/// Per-position layer normalization over the last dimension, then affine.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (out, _) = layer_norm_cached(x, gamma, beta, eps)?;
    Ok(out)
}

/// Cache of normalized inputs and inverse standard deviations for backward.
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_cached(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if eps <= 0.0 {
        // eps == 0 is tolerated for hand-check fixtures only.
        if eps < 0.0 {
            return Err(Error::Argument("layer_norm eps must be >= 0".into()));
        }
    }
    let h = x.cols();
    if gamma.len() != h || beta.len() != h {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let rows = x.rows();
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(rows);
    let mut out = Tensor::zeros(x.shape())?;
    for i in 0..rows {
        let row = xhat.row_mut(i);
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for v in row.iter_mut() {
            *v = (*v - mean) * istd;
        }
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = gamma.data()[j] * row[j] + beta.data()[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Backward through layer_norm. Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dy: &Tensor,
    gamma: &Tensor,
    cache: &LayerNormCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    let h = dy.cols();
    let rows = dy.rows();
    let mut dx = Tensor::zeros(dy.shape())?;
    let mut dgamma = Tensor::zeros(&[h])?;
    let mut dbeta = Tensor::zeros(&[h])?;
    for i in 0..rows {
        let dy_row = dy.row(i);
        let xhat_row = cache.xhat.row(i);
        let istd = cache.inv_std[i];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..h {
            let dxhat = dy_row[j] * gamma.data()[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat_row[j];
            dgamma.data_mut()[j] += dy_row[j] * xhat_row[j];
            dbeta.data_mut()[j] += dy_row[j];
        }
        mean_dxhat /= h as f64;
        mean_dxhat_xhat /= h as f64;
        let dx_row = dx.row_mut(i);
        for j in 0..h {
            let dxhat = dy_row[j] * gamma.data()[j];
            dx_row[j] = istd * (dxhat - mean_dxhat - xhat_row[j] * mean_dxhat_xhat);
        }
    }
    Ok((dx, dgamma, dbeta))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Elementwise tanh-approximation GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

/// Least-squares fit of `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual_sum_squares: f64,
}

impl LineFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Ordinary least squares on a line. Exact on collinear input; errors when
/// fewer than two distinct x values are supplied.
pub fn ols_line_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() {
        return Err(Error::Argument(format!(
            "ols_line_fit: {} xs vs {} ys",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Argument("ols_line_fit needs at least 2 points".into()));
    }
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - x_mean) * (x - x_mean);
        sxy += (x - x_mean) * (y - y_mean);
    }
    if sxx == 0.0 {
        return Err(Error::SingularDesign);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let rss = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y - slope * x - intercept;
            r * r
        })
        .sum();
    Ok(LineFit {
        slope,
        intercept,
        residual_sum_squares: rss,
    })
}

/// Central-difference gradient of a scalar function, `(f(x+h e_i) - f(x-h e_i)) / 2h`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::Argument("finite_diff_grad: h must be positive".into()));
    }
    let mut point = x.clone();
    let mut grad = Tensor::zeros(x.shape())?;
    for i in 0..x.len() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + h;
        let fp = f(&point);
        point.data_mut()[i] = orig - h;
        let fm = f(&point);
        point.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad evaluation".into()));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t2(2, 2, &[3.0, -1.0, 2.5, 7.0]);
        let i = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&i, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[5.0, 6.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[3, 4]).unwrap();
        let b = t2(4, 2, &(0..8).map(|i| i as f64 - 3.0).collect::<Vec<_>>());
        let c = matmul(&z, &b).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert_eq!(c.shape(), &[3, 2]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[4, 2]).unwrap();
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_bt_and_at_match_explicit_transpose() {
        let mut rng = crate::test_rng(7);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng).unwrap();
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng).unwrap();
        let c = Tensor::randn(&[3, 4], 1.0, &mut rng).unwrap();
        let bt = matmul(&a, &b.transpose2().unwrap()).unwrap();
        let fast = matmul_bt(&a, &b).unwrap();
        for (x, y) in bt.data().iter().zip(fast.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = matmul(&a.transpose2().unwrap(), &c).unwrap();
        let fast = matmul_at(&a, &c).unwrap();
        for (x, y) in at.data().iter().zip(fast.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_logits() {
        let x = t2(1, 4, &[0.0; 4]);
        let p = softmax_rows(&x).unwrap();
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_entry_is_exactly_zero() {
        let x = t2(1, 2, &[f64::NEG_INFINITY, 0.0]);
        let p = softmax_rows(&x).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = t2(1, 3, &[1.0, 2.0, 3.0]);
        let p = softmax_rows(&x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, &v) in p.data().iter().enumerate() {
            let expect = ((j + 1) as f64).exp() / z;
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let x = t2(1, 3, &[f64::NEG_INFINITY; 3]);
        assert!(matches!(
            softmax_rows(&x).unwrap_err(),
            Error::DegenerateRow { row: 0 }
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t2(1, 4, &[5.0; 4]);
        let g = Tensor::full(&[4], 1.0).unwrap();
        let b = Tensor::zeros(&[4]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_hand_case() {
        // x=[1,3], mean 2, var 1 -> [-1, 1] with eps=0
        let x = t2(1, 2, &[1.0, 3.0]);
        let g = Tensor::full(&[2], 1.0).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let y = layer_norm(&x, &g, &b, 0.0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_beta_shift_property() {
        let mut rng = crate::test_rng(3);
        let x = Tensor::randn(&[4, 8], 2.0, &mut rng).unwrap();
        let g = Tensor::full(&[8], 1.0).unwrap();
        let zero = Tensor::zeros(&[8]).unwrap();
        let c = Tensor::full(&[8], 0.37).unwrap();
        let base = layer_norm(&x, &g, &zero, 1e-5).unwrap();
        let shifted = layer_norm(&x, &g, &c, 1e-5).unwrap();
        for (a, b) in base.data().iter().zip(shifted.data()) {
            assert!((a + 0.37 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalizes_mean_and_variance() {
        let mut rng = crate::test_rng(11);
        let x = Tensor::randn(&[6, 16], 3.0, &mut rng).unwrap();
        let g = Tensor::full(&[16], 1.0).unwrap();
        let b = Tensor::zeros(&[16]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        for i in 0..6 {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = crate::test_rng(5);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng).unwrap();
        let g = Tensor::randn(&[6], 0.5, &mut rng).unwrap();
        let b = Tensor::randn(&[6], 0.5, &mut rng).unwrap();
        let dy = Tensor::randn(&[3, 6], 1.0, &mut rng).unwrap();
        let (_, cache) = layer_norm_cached(&x, &g, &b, 1e-6).unwrap();
        let (dx, dgamma, dbeta) = layer_norm_backward(&dy, &g, &cache).unwrap();
        let loss = |xx: &Tensor| {
            let y = layer_norm(xx, &g, &b, 1e-6).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, w)| a * w).sum()
        };
        let fd = finite_diff_grad(loss, &x, 1e-6).unwrap();
        for (a, b) in dx.data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-6, "dx {a} vs fd {b}");
        }
        let loss_g = |gg: &Tensor| {
            let y = layer_norm(&x, gg, &b, 1e-6).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, w)| a * w).sum()
        };
        let fd_g = finite_diff_grad(loss_g, &g, 1e-6).unwrap();
        for (a, b) in dgamma.data().iter().zip(fd_g.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((dbeta.data()[0] - dy.data()[0] - dy.data()[6] - dy.data()[12]).abs() < 1e-12);
    }

    #[test]
    fn gelu_zero_and_asymptote() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        let x = 20.0;
        assert!((gelu_scalar(x) - x).abs() / x < 1e-6);
    }

    #[test]
    fn gelu_at_one_matches_formula() {
        let u: f64 = GELU_C * (1.0 + GELU_A);
        let expect = 0.5 * (1.0 + u.tanh());
        assert!((gelu_scalar(1.0) - expect).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.3, 0.0, 0.7, 2.0] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((gelu_grad_scalar(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn gelu_monotone_above_dip() {
        // The tanh-approximation GELU dips below zero with a minimum near
        // x = -0.75 and is nondecreasing to the right of it.
        let mut prev = f64::NEG_INFINITY;
        let mut x = -0.75;
        while x <= 6.0 {
            let v = gelu_scalar(x);
            assert!(v >= prev, "not monotone at x={x}");
            prev = v;
            x += 0.01;
        }
    }

    #[test]
    fn ols_exact_two_points() {
        let fit = ols_line_fit(&[0.0, 1.0], &[1.0, 3.0]).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-15);
        assert!((fit.intercept - 1.0).abs() < 1e-15);
        assert!(fit.residual_sum_squares < 1e-24);
    }

    #[test]
    fn ols_recovers_activation_memory_line() {
        let xs = [128.0, 256.0, 512.0, 1024.0];
        let ys: Vec<f64> = xs.iter().map(|&x| 0.00715 * x + 4.83).collect();
        let fit = ols_line_fit(&xs, &ys).unwrap();
        assert!((fit.slope - 0.00715).abs() < 1e-9);
        assert!((fit.intercept - 4.83).abs() < 1e-9);
    }

    #[test]
    fn ols_symmetric_noise_keeps_slope() {
        // Perturb two points equidistant from the mean by +/- delta.
        let xs = [1.0, 2.0, 3.0, 4.0];
        let base: Vec<f64> = xs.iter().map(|&x| 3.0 * x - 1.0).collect();
        let fit0 = ols_line_fit(&xs, &base).unwrap();
        let mut ys = base.clone();
        ys[0] += 0.5;
        ys[3] += 0.5;
        let fit1 = ols_line_fit(&xs, &ys).unwrap();
        assert!((fit0.slope - fit1.slope).abs() < 1e-12);
    }

    #[test]
    fn ols_all_equal_x_is_singular() {
        let err = ols_line_fit(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::SingularDesign));
    }

    #[test]
    fn ols_residuals_orthogonal_to_design() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| 2.0 * x + 1.0 + if i % 2 == 0 { 0.1 } else { -0.07 })
            .collect();
        let fit = ols_line_fit(&xs, &ys).unwrap();
        let mut sum_r = 0.0;
        let mut sum_rx = 0.0;
        for (&x, &y) in xs.iter().zip(&ys) {
            let r = y - fit.predict(x);
            sum_r += r;
            sum_rx += r * x;
        }
        assert!(sum_r.abs() < 1e-9);
        assert!(sum_rx.abs() < 1e-9);
    }

    #[test]
    fn finite_diff_quadratic() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let grad =
            finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert!((grad.data()[0] - 2.0).abs() < 1e-8);
        assert!((grad.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_linear_exact_for_any_h() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        for &h in &[1e-2, 1e-4, 1e-6] {
            let grad = finite_diff_grad(
                |t| 3.0 * t.data()[0] - 2.0 * t.data()[1] + 0.5 * t.data()[2],
                &x,
                h,
            )
            .unwrap();
            assert!((grad.data()[0] - 3.0).abs() < 1e-9);
            assert!((grad.data()[1] + 2.0).abs() < 1e-9);
            assert!((grad.data()[2] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_rejects_non_finite() {
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let err = finite_diff_grad(|t| t.data()[0].ln(), &x, 1e-5)
            .map(|_| ())
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn rank_cap_enforced() {
        assert!(Tensor::zeros(&[2, 2, 2]).is_ok());
        assert!(Tensor::zeros(&[2, 2, 2, 2]).is_err());
        assert!(Tensor::zeros(&[]).is_err());
    }
}
