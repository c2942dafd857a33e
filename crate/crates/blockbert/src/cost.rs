//! Analytic FLOPs and memory estimates, the model/optimizer/activation memory
//! taxonomy, and the OLS regression that splits measured activation bytes
//! into quadratic and linear components.
//!
//! FLOPs convention, stated in every report header: one multiply-add counts
//! as 2 FLOPs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{model_forward, ModelConfig, ModelParams};
use crate::tensor::ols_line_fit;
use crate::track::{profile_activation, tracker};

pub const FLOPS_NOTE: &str = "FLOPs convention: 1 multiply-add = 2 FLOPs";

fn check_blocks(seq_len: usize, num_blocks: usize) -> Result<()> {
    if num_blocks == 0 || seq_len % num_blocks != 0 {
        return Err(Error::Argument(format!(
            "block count {num_blocks} must divide sequence length {seq_len}"
        )));
    }
    Ok(())
}

/// FLOPs for the score product QKᵀ of one head in one layer: the N²/n score
/// entries each take d multiply-adds.
pub fn score_flops_per_head_layer(seq_len: usize, head_dim: usize, num_blocks: usize) -> Result<u64> {
    check_blocks(seq_len, num_blocks)?;
    let n2 = (seq_len as u64 * seq_len as u64) / num_blocks as u64;
    Ok(2 * n2 * head_dim as u64)
}

/// Total attention FLOPs across heads and layers: scores (QKᵀ) plus the
/// probability-value mix (PV), each 2·(N²/n)·d per head-layer.
pub fn attention_flops(
    seq_len: usize,
    head_dim: usize,
    heads: usize,
    layers: usize,
    num_blocks: usize,
) -> Result<u64> {
    let per = score_flops_per_head_layer(seq_len, head_dim, num_blocks)?;
    Ok(2 * per * heads as u64 * layers as u64)
}

/// FLOPs for the Q/K/V/output projections (four H×H matrices per layer).
pub fn projection_flops(seq_len: usize, hidden: usize, layers: usize) -> u64 {
    8 * seq_len as u64 * hidden as u64 * hidden as u64 * layers as u64
}

/// FLOPs for the two feed-forward matrices (H×4H and 4H×H per layer).
pub fn ffn_flops(seq_len: usize, hidden: usize, layers: usize) -> u64 {
    16 * seq_len as u64 * hidden as u64 * hidden as u64 * layers as u64
}

/// Score-matrix floats materialized across all heads and layers.
pub fn attention_score_floats(
    seq_len: usize,
    heads: usize,
    layers: usize,
    num_blocks: usize,
) -> Result<u64> {
    check_blocks(seq_len, num_blocks)?;
    let n2 = (seq_len as u64 * seq_len as u64) / num_blocks as u64;
    Ok(n2 * heads as u64 * layers as u64)
}

/// The three training-memory classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryBreakdown {
    pub model_bytes: u64,
    pub optimizer_bytes: u64,
    pub activation_bytes: u64,
}

impl MemoryBreakdown {
    pub fn total(&self) -> u64 {
        self.model_bytes + self.optimizer_bytes + self.activation_bytes
    }
}

/// Model and optimizer memory: parameter bytes, and the optimizer's moments
/// and gradients at 3x (theory) or 5x (common implementations) the model.
pub fn static_memory(
    param_count: u64,
    bytes_per_param: u64,
    optimizer_multiplier: u64,
) -> Result<MemoryBreakdown> {
    if optimizer_multiplier != 3 && optimizer_multiplier != 5 {
        return Err(Error::Argument(format!(
            "optimizer multiplier must be 3 or 5, got {optimizer_multiplier}"
        )));
    }
    let model_bytes = param_count * bytes_per_param;
    Ok(MemoryBreakdown {
        model_bytes,
        optimizer_bytes: optimizer_multiplier * model_bytes,
        activation_bytes: 0,
    })
}

/// Parameter count of the BERT-Base reference configuration (V=30522, H=768,
/// L=12, N=512, including the pooler head).
pub fn bert_base_param_count() -> u64 {
    let (v, h, l, n, f) = (30522u64, 768u64, 12u64, 512u64, 3072u64);
    let embeddings = v * h + n * h + 2 * h + 2 * h; // word, position, type, LN
    let per_layer = 4 * h * h + 4 * h   // Q, K, V, output projections
        + 2 * h                          // attention LN
        + h * f + f                      // FFN in
        + f * h + h                      // FFN out
        + 2 * h; // FFN LN
    let pooler = h * h + h;
    embeddings + l * per_layer + pooler
}

pub const GB: f64 = 1024.0 * 1024.0 * 1024.0;

/// Per-configuration cost summary.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub label: String,
    pub seq_len: usize,
    pub num_blocks: usize,
    pub attention_score_floats: u64,
    pub attention_flops: u64,
    pub projection_flops: u64,
    pub ffn_flops: u64,
    /// Score-memory and score-FLOPs reduction versus the dense (n = 1) layout.
    pub reduction_factor: u64,
}

impl CostReport {
    pub fn new(
        label: impl Into<String>,
        seq_len: usize,
        hidden: usize,
        heads: usize,
        layers: usize,
        num_blocks: usize,
    ) -> Result<CostReport> {
        let head_dim = hidden / heads;
        Ok(CostReport {
            label: label.into(),
            seq_len,
            num_blocks,
            attention_score_floats: attention_score_floats(seq_len, heads, layers, num_blocks)?,
            attention_flops: attention_flops(seq_len, head_dim, heads, layers, num_blocks)?,
            projection_flops: projection_flops(seq_len, hidden, layers),
            ffn_flops: ffn_flops(seq_len, hidden, layers),
            reduction_factor: num_blocks as u64,
        })
    }
}

/// Fitted activation-memory polynomial a2·b·N² + a1·b·N + a0 under fixed b·N.
/// Only `a2` and the combined linear term `a1·(b·N) + a0` are identifiable
/// from measurements taken at constant b·N, so that is what is reported.
#[derive(Debug, Clone, Copy)]
pub struct RegressionFit {
    pub a2: f64,
    /// a1·(b·N) + a0: the intercept of the reduced line in N.
    pub combined_linear: f64,
    pub tokens_per_batch: u64,
    pub r_squared: f64,
}

impl RegressionFit {
    /// Slope of the reduced line: bytes per unit N, equal to (b·N)·a2.
    pub fn slope(&self) -> f64 {
        self.a2 * self.tokens_per_batch as f64
    }

    pub fn predict(&self, seq_len: f64) -> f64 {
        self.slope() * seq_len + self.combined_linear
    }
}

/// Minimum R² a measured fit must reach before it is reported.
pub const MIN_R_SQUARED: f64 = 0.99;

/// Fit measured activation bytes against N for points sharing a fixed b·N.
/// With b·N constant the polynomial collapses to a line in N with slope
/// (b·N)·a2, so an ordinary least-squares line recovers the quadratic
/// coefficient. Rejects fits with R² below [`MIN_R_SQUARED`].
pub fn regress_activation(points: &[(usize, usize, f64)]) -> Result<RegressionFit> {
    if points.is_empty() {
        return Err(Error::Argument("regression requires measurements".into()));
    }
    let tokens = points[0].0 as u64 * points[0].1 as u64;
    for &(n, b, _) in points {
        if n as u64 * b as u64 != tokens {
            return Err(Error::Argument(format!(
                "all points must share b*N = {tokens}; got N={n}, b={b}"
            )));
        }
    }
    let mut ns: Vec<usize> = points.iter().map(|p| p.0).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 3 {
        return Err(Error::Argument(format!(
            "regression needs at least 3 distinct sequence lengths, got {}",
            ns.len()
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.2).collect();
    let fit = ols_line_fit(&xs, &ys)?;

    let mean_y = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - fit.residual_sum_squares / ss_tot
    };
    if r_squared < MIN_R_SQUARED {
        return Err(Error::Argument(format!(
            "fit rejected: R^2 = {r_squared:.4} below the {MIN_R_SQUARED} threshold"
        )));
    }
    Ok(RegressionFit {
        a2: fit.slope / tokens as f64,
        combined_linear: fit.intercept,
        tokens_per_batch: tokens,
        r_squared,
    })
}

/// Measure the activation high-water mark of one cached forward pass: peak
/// live bytes inside the pass minus bytes live before it.
pub fn measure_model_activation(
    params: &ModelParams,
    config: &ModelConfig,
    ids: &[Vec<usize>],
) -> Result<u64> {
    let trk = tracker();
    let was_enabled = trk.is_enabled();
    trk.enable();
    let (res, bytes) = profile_activation(|| {
        // A fixed dropout stream keeps the measurement deterministic.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model_forward(ids, params, config, true, Some(&mut rng))
    })?;
    if !was_enabled {
        trk.disable();
    }
    res?;
    Ok(bytes as u64)
}

/// One row of the estimated-memory table: the fitted line's quadratic part
/// divided by the block count, alongside the unchanging linear part.
#[derive(Debug, Clone, Copy)]
pub struct ReductionRow {
    pub seq_len: usize,
    pub num_blocks: usize,
    pub quadratic_gb: f64,
    pub linear_gb: f64,
}

/// Expand a fitted line (slope and intercept in GB, as in an activation
/// regression at fixed b·N) into per-(N, n) estimates: the quadratic
/// component scales as N/n, the linear component is the shared intercept.
pub fn reduction_table(
    slope_gb: f64,
    intercept_gb: f64,
    seq_lens: &[usize],
    block_counts: &[usize],
) -> Vec<ReductionRow> {
    let mut rows = Vec::new();
    for &n in seq_lens {
        for &blocks in block_counts {
            rows.push(ReductionRow {
                seq_len: n,
                num_blocks: blocks,
                quadratic_gb: slope_gb * n as f64 / blocks as f64,
                linear_gb: intercept_gb,
            });
        }
    }
    rows
}

/// Generic report row for the CSV/table interfaces.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub config: String,
    pub seq_len: usize,
    pub num_blocks: usize,
    pub metric: String,
    pub value: String,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("config,N,n,metric,value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.config, r.seq_len, r.num_blocks, r.metric, r.value
        ));
    }
    out
}

pub fn report_table(rows: &[ReportRow]) -> String {
    let headers = ["config", "N", "n", "metric", "value"];
    let mut cells: Vec<[String; 5]> = vec![headers.map(str::to_string)];
    for r in rows {
        cells.push([
            r.config.clone(),
            r.seq_len.to_string(),
            r.num_blocks.to_string(),
            r.metric.clone(),
            r.value.clone(),
        ]);
    }
    let mut widths = [0usize; 5];
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::blockwise_attention;
    use crate::mask::{shift_permutation, HeadAssignment, Permutation};
    use crate::tensor::{matmul, Tensor};
    use crate::test_rng;
    use crate::track::TRACK_LOCK;

    #[test]
    fn score_flops_examples() {
        assert_eq!(score_flops_per_head_layer(512, 64, 1).unwrap(), 33_554_432);
        assert_eq!(score_flops_per_head_layer(512, 64, 2).unwrap(), 16_777_216);
        // Block size 1: the score "matrix" collapses to the diagonal.
        assert_eq!(score_flops_per_head_layer(512, 64, 512).unwrap(), 2 * 512 * 64);
    }

    #[test]
    fn attention_flops_scale_inversely_with_blocks() {
        for n in [1usize, 2, 4, 8] {
            let f = attention_flops(256, 32, 4, 2, n).unwrap();
            assert_eq!(f * n as u64, attention_flops(256, 32, 4, 2, 1).unwrap());
        }
        assert!(attention_flops(10, 8, 2, 1, 3).is_err());
    }

    #[test]
    fn bert_base_static_memory_matches_published_scale() {
        let params = bert_base_param_count();
        assert_eq!(params, 109_482_240);
        let fp16 = static_memory(params, 2, 3).unwrap();
        assert!((fp16.model_bytes as f64 / GB - 0.2).abs() < 0.01);
        let five = static_memory(params, 2, 5).unwrap();
        assert!((five.optimizer_bytes as f64 / GB - 1.0).abs() < 0.05);
        assert_eq!(five.total(), 6 * five.model_bytes);
    }

    #[test]
    fn static_memory_zero_and_bad_multiplier() {
        let z = static_memory(0, 4, 3).unwrap();
        assert_eq!(z.total(), 0);
        assert!(static_memory(10, 4, 4).is_err());
    }

    #[test]
    fn regression_recovers_exact_synthetic_coefficients() {
        // bytes = a2 b N^2 + a1 b N + a0 at fixed b N = 4096.
        let (a2, a1, a0) = (3.5, 200.0, 1.0e6);
        let tokens = 4096.0;
        let points: Vec<(usize, usize, f64)> = [128usize, 256, 512, 1024]
            .iter()
            .map(|&n| {
                let b = 4096 / n;
                let y = a2 * tokens * n as f64 + a1 * tokens + a0;
                (n, b, y)
            })
            .collect();
        let fit = regress_activation(&points).unwrap();
        assert!((fit.a2 - a2).abs() < 1e-9);
        assert!((fit.combined_linear - (a1 * tokens + a0)).abs() < 1e-6);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regression_input_validation() {
        // Inconsistent b*N.
        let bad = [(128, 32, 1.0), (256, 32, 2.0), (512, 8, 3.0)];
        assert!(regress_activation(&bad).is_err());
        // Too few distinct N.
        let few = [(128, 32, 1.0), (256, 16, 2.0)];
        assert!(regress_activation(&few).is_err());
    }

    #[test]
    fn regression_rejects_poor_fits() {
        let noisy = [
            (128usize, 32usize, 1.0e6),
            (256, 16, 9.0e6),
            (512, 8, 2.0e6),
            (1024, 4, 8.0e6),
        ];
        let err = regress_activation(&noisy).unwrap_err();
        assert!(err.to_string().contains("R^2"));
    }

    #[test]
    fn reduction_table_reproduces_fitted_line_values() {
        // Fitted activation line in GB at fixed b*N: 0.00715 N + 4.83.
        let rows = reduction_table(0.00715, 4.83, &[512, 1024], &[1, 2, 3]);
        let expect = [
            (512, 1, 3.66),
            (512, 2, 1.83),
            (512, 3, 1.22),
            (1024, 1, 7.32),
            (1024, 2, 3.66),
            (1024, 3, 2.44),
        ];
        for (row, (n, blocks, gb)) in rows.iter().zip(expect) {
            assert_eq!(row.seq_len, n);
            assert_eq!(row.num_blocks, blocks);
            assert!(
                (row.quadratic_gb - gb).abs() <= 0.01,
                "N={n} n={blocks}: {} vs {gb}",
                row.quadratic_gb
            );
            assert_eq!(row.linear_gb, 4.83);
        }
        // The n=1 row is the dense estimate itself.
        assert_eq!(rows[0].quadratic_gb, 0.00715 * 512.0);
    }

    #[test]
    fn matmul_activation_accounting_is_exact() {
        let _g = TRACK_LOCK.lock().unwrap_or_else(|p| p.into_inner());
        let trk = tracker();
        trk.enable();
        trk.reset();
        let a = Tensor::from_vec(&[3, 2], vec![1.0; 6]).unwrap();
        let b = Tensor::from_vec(&[2, 5], vec![1.0; 10]).unwrap();
        let (c, bytes) = profile_activation(|| matmul(&a, &b).unwrap()).unwrap();
        assert_eq!(bytes, 3 * 5 * 8);
        drop(c);
        trk.disable();
    }

    #[test]
    fn analytic_score_floats_match_tracker_exactly() {
        let _g = TRACK_LOCK.lock().unwrap_or_else(|p| p.into_inner());
        let trk = tracker();
        trk.enable();
        trk.reset();
        let mut rng = test_rng(3);
        let (n, d) = (16usize, 4usize);
        for blocks in [1usize, 2, 4] {
            trk.reset();
            let q = Tensor::randn(&[n, d], 1.0, &mut rng).unwrap();
            let k = Tensor::randn(&[n, d], 1.0, &mut rng).unwrap();
            let v = Tensor::randn(&[n, d], 1.0, &mut rng).unwrap();
            let perm = if blocks == 1 {
                Permutation::identity(1)
            } else {
                shift_permutation(blocks, 1).unwrap()
            };
            let _ = blockwise_attention(&q, &k, &v, blocks, &perm).unwrap();
            let analytic = attention_score_floats(n, 1, 1, blocks).unwrap() * 8;
            assert_eq!(trk.score_bytes() as u64, analytic);
        }
        trk.disable();
    }

    #[test]
    fn doubling_batch_doubles_measured_activation() {
        let _g = TRACK_LOCK.lock().unwrap_or_else(|p| p.into_inner());
        let assignment = HeadAssignment::from_counts(2, &[1, 1]).unwrap();
        let config = ModelConfig::new(1, 16, 2, 16, 2, 32, assignment, 0.0).unwrap();
        let params = ModelParams::init(&config, &mut test_rng(5)).unwrap();
        let seq: Vec<usize> = (0..16).map(|i| 5 + i % 20).collect();
        // Per-run transient buffers are amortized over the batch, so compare
        // batches large enough for the per-sequence caches to dominate.
        let two = measure_model_activation(&params, &config, &vec![seq.clone(); 2]).unwrap();
        let four = measure_model_activation(&params, &config, &vec![seq.clone(); 4]).unwrap();
        let ratio = four as f64 / two as f64;
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn empty_batch_measures_zero() {
        let _g = TRACK_LOCK.lock().unwrap_or_else(|p| p.into_inner());
        let assignment = HeadAssignment::from_counts(2, &[1, 1]).unwrap();
        let config = ModelConfig::new(1, 16, 2, 16, 2, 32, assignment, 0.0).unwrap();
        let params = ModelParams::init(&config, &mut test_rng(5)).unwrap();
        let bytes = measure_model_activation(&params, &config, &[]).unwrap();
        assert_eq!(bytes, 0);
    }

    #[test]
    fn report_formats() {
        let rows = vec![ReportRow {
            config: "dense".into(),
            seq_len: 512,
            num_blocks: 1,
            metric: "attention_flops".into(),
            value: "33554432".into(),
        }];
        let csv = report_csv(&rows);
        assert!(csv.starts_with("config,N,n,metric,value\n"));
        assert!(csv.contains("dense,512,1,attention_flops,33554432"));
        let table = report_table(&rows);
        let mut lines = table.lines();
        assert!(lines.next().unwrap().starts_with("config"));
        assert!(lines.next().unwrap().contains("dense"));
    }
}
