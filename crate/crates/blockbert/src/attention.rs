//! Dense, masked, and blockwise scaled dot-product attention with analytic
//! backward passes, and blockwise multi-head attention with per-head block
//! permutations.
//!
//! The blockwise path never materializes an N x N score matrix: only the n
//! blocks of size (N/n)^2 named by the permutation are computed, in both the
//! forward and the backward pass. Every score-sized buffer is reported to the
//! allocation tracker so the quadratic-memory accounting stays exact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{Mask, Permutation};
use crate::tensor::{matmul, matmul_at, matmul_bt, softmax_rows_inplace, Tensor};
use crate::track::tracker;

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Shape {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    Ok((q.shape()[0], q.shape()[1]))
}

fn record_scores(tensor: &Tensor) {
    tracker().record_score_bytes(tensor.len() * std::mem::size_of::<f64>());
}

/// Dense scaled dot-product attention, `softmax(Q K^T / sqrt(d)) V`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, d) = check_qkv(q, k, v)?;
    let mut scores = matmul_bt(q, k)?;
    scores.scale(1.0 / (d as f64).sqrt());
    record_scores(&scores);
    softmax_rows_inplace(&mut scores)?;
    matmul(&scores, v)
}

/// Masked attention: masked-out score entries are set to `-inf` before the
/// softmax, so they receive probability exactly zero.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (n, d) = check_qkv(q, k, v)?;
    if mask.n_rows() != n || mask.n_cols() != n {
        return Err(Error::Shape {
            op: "masked_attention",
            left: q.shape().to_vec(),
            right: vec![mask.n_rows(), mask.n_cols()],
        });
    }
    for i in 0..n {
        if mask.row_count(i) == 0 {
            return Err(Error::DegenerateRow { row: i });
        }
    }
    let mut scores = matmul_bt(q, k)?;
    scores.scale(1.0 / (d as f64).sqrt());
    record_scores(&scores);
    for i in 0..n {
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            if !mask.get(i, j) {
                *s = f64::NEG_INFINITY;
            }
        }
    }
    softmax_rows_inplace(&mut scores)?;
    matmul(&scores, v)
}

/// Per-block softmax probabilities cached by the blockwise forward pass.
pub struct BlockAttnCache {
    /// `probs[i]` is the (N/n) x (N/n) attention distribution of query block i
    /// over key block pi(i).
    pub probs: Vec<Tensor>,
}

/// Blockwise attention: query block i attends only to key/value block pi(i).
/// Requires `num_blocks` to divide the sequence length (callers pad first).
pub fn blockwise_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    num_blocks: usize,
    perm: &Permutation,
) -> Result<Tensor> {
    let (out, _) = blockwise_attention_cached(q, k, v, num_blocks, perm)?;
    Ok(out)
}

pub fn blockwise_attention_cached(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    num_blocks: usize,
    perm: &Permutation,
) -> Result<(Tensor, BlockAttnCache)> {
    let (n, d) = check_qkv(q, k, v)?;
    if num_blocks == 0 || n % num_blocks != 0 {
        return Err(Error::Argument(format!(
            "blockwise attention: {num_blocks} blocks require padding for sequence length {n}"
        )));
    }
    if perm.len() != num_blocks {
        return Err(Error::Argument(format!(
            "permutation over {} blocks does not match num_blocks {num_blocks}",
            perm.len()
        )));
    }
    let bs = n / num_blocks;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[n, d])?;
    let mut probs = Vec::with_capacity(num_blocks);
    for bi in 0..num_blocks {
        let bj = perm.map(bi);
        let qb = q.slice_rows(bi * bs, (bi + 1) * bs);
        let kb = k.slice_rows(bj * bs, (bj + 1) * bs);
        let vb = v.slice_rows(bj * bs, (bj + 1) * bs);
        let mut scores = matmul_bt(&qb, &kb)?;
        scores.scale(scale);
        record_scores(&scores);
        softmax_rows_inplace(&mut scores)?;
        let ob = matmul(&scores, &vb)?;
        out.copy_rows_from(bi * bs, &ob);
        probs.push(scores);
    }
    Ok((out, BlockAttnCache { probs }))
}

/// Analytic backward through blockwise attention. Block-local: gradients for
/// key/value block j come only from query blocks mapped onto it.
pub fn blockwise_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    num_blocks: usize,
    perm: &Permutation,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, cache) = blockwise_attention_cached(q, k, v, num_blocks, perm)?;
    blockwise_attention_backward_cached(q, k, v, &cache, None, num_blocks, perm, upstream)
}

/// Backward using cached probabilities (and dropout masks when attention
/// dropout was active in the forward pass).
#[allow(clippy::too_many_arguments)]
pub fn blockwise_attention_backward_cached(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cache: &BlockAttnCache,
    dropout_masks: Option<&[Tensor]>,
    num_blocks: usize,
    perm: &Permutation,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = check_qkv(q, k, v)?;
    if upstream.shape() != q.shape() {
        return Err(Error::Shape {
            op: "blockwise_attention_backward",
            left: upstream.shape().to_vec(),
            right: q.shape().to_vec(),
        });
    }
    let bs = n / num_blocks;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Tensor::zeros(&[n, d])?;
    let mut dk = Tensor::zeros(&[n, d])?;
    let mut dv = Tensor::zeros(&[n, d])?;
    for bi in 0..num_blocks {
        let bj = perm.map(bi);
        let qb = q.slice_rows(bi * bs, (bi + 1) * bs);
        let kb = k.slice_rows(bj * bs, (bj + 1) * bs);
        let vb = v.slice_rows(bj * bs, (bj + 1) * bs);
        let dout = upstream.slice_rows(bi * bs, (bi + 1) * bs);
        let probs = &cache.probs[bi];

        // Effective probabilities that produced the output.
        let p_eff = match dropout_masks {
            Some(masks) => {
                let mut p = probs.clone();
                for (a, m) in p.data_mut().iter_mut().zip(masks[bi].data()) {
                    *a *= m;
                }
                p
            }
            None => probs.clone(),
        };

        // dV_j += P_eff^T dO_i
        let dvb = matmul_at(&p_eff, &dout)?;
        for r in 0..bs {
            let dst = dv.row_mut(bj * bs + r);
            for (a, b) in dst.iter_mut().zip(dvb.row(r)) {
                *a += b;
            }
        }

        // dP = dO_i V_j^T, then through dropout and the softmax Jacobian.
        let mut dp = matmul_bt(&dout, &vb)?;
        record_scores(&dp);
        if let Some(masks) = dropout_masks {
            for (a, m) in dp.data_mut().iter_mut().zip(masks[bi].data()) {
                *a *= m;
            }
        }
        // dS = P .* (dP - rowsum(dP .* P)), in place.
        for r in 0..bs {
            let p_row = probs.row(r);
            let dp_row = dp.row_mut(r);
            let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
            for (s, &p) in dp_row.iter_mut().zip(p_row) {
                *s = p * (*s - dot);
            }
        }
        dp.scale(scale);

        // dQ_i = dS K_j, dK_j += dS^T Q_i
        let dqb = matmul(&dp, &kb)?;
        dq.copy_rows_from(bi * bs, &dqb);
        let dkb = matmul_at(&dp, &qb)?;
        for r in 0..bs {
            let dst = dk.row_mut(bj * bs + r);
            for (a, b) in dst.iter_mut().zip(dkb.row(r)) {
                *a += b;
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Per-head projection matrices; the output projection is shared and lives in
/// [`MultiHeadParams`].
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    pub wo: Tensor,
}

impl MultiHeadParams {
    /// Gaussian-initialized parameters for `num_heads` heads of width
    /// `hidden / num_heads`.
    pub fn init(hidden: usize, num_heads: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        if num_heads == 0 || hidden % num_heads != 0 {
            return Err(Error::Argument(format!(
                "head count {num_heads} must divide hidden size {hidden}"
            )));
        }
        let d = hidden / num_heads;
        let mut heads = Vec::with_capacity(num_heads);
        for _ in 0..num_heads {
            heads.push(HeadParams {
                wq: Tensor::randn(&[hidden, d], std, rng)?,
                wk: Tensor::randn(&[hidden, d], std, rng)?,
                wv: Tensor::randn(&[hidden, d], std, rng)?,
            });
        }
        Ok(MultiHeadParams {
            heads,
            wo: Tensor::randn(&[hidden, hidden], std, rng)?,
        })
    }
}

pub struct HeadCache {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub attn: BlockAttnCache,
    /// Per-block multiplicative dropout masks (0 or 1/(1-p)), when active.
    pub dropout: Option<Vec<Tensor>>,
}

pub struct MhaCache {
    pub heads: Vec<HeadCache>,
    pub concat: Tensor,
}

/// Blockwise multi-head attention over a single sequence: head i computes
/// blockwise attention under its own permutation; head outputs are
/// concatenated in head order and projected.
pub fn blockwise_multihead_attention(
    x: &Tensor,
    params: &MultiHeadParams,
    num_blocks: usize,
    head_perms: &[Permutation],
) -> Result<Tensor> {
    let (out, _) = mha_forward(x, params, num_blocks, head_perms, 0.0, None)?;
    Ok(out)
}

/// Forward pass retaining everything backward needs. `dropout > 0` with an
/// RNG applies inverted dropout to the attention probabilities.
pub fn mha_forward(
    x: &Tensor,
    params: &MultiHeadParams,
    num_blocks: usize,
    head_perms: &[Permutation],
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, MhaCache)> {
    if head_perms.len() != params.heads.len() {
        return Err(Error::Argument(format!(
            "{} head permutations for {} heads",
            head_perms.len(),
            params.heads.len()
        )));
    }
    let n = x.shape()[0];
    let hidden = x.shape()[1];
    let num_heads = params.heads.len();
    let d = hidden / num_heads;
    let mut concat = Tensor::zeros(&[n, hidden])?;
    let mut head_caches = Vec::with_capacity(num_heads);
    for (h, (hp, perm)) in params.heads.iter().zip(head_perms).enumerate() {
        let q = matmul(x, &hp.wq)?;
        let k = matmul(x, &hp.wk)?;
        let v = matmul(x, &hp.wv)?;
        let (mut out, attn) = blockwise_attention_cached(&q, &k, &v, num_blocks, perm)?;
        let mut drop_masks = None;
        if dropout > 0.0 {
            let rng = rng
                .as_deref_mut()
                .ok_or_else(|| Error::Argument("dropout requires an RNG".into()))?;
            let keep = 1.0 - dropout;
            let mut masks = Vec::with_capacity(attn.probs.len());
            for p in &attn.probs {
                let mut m = Tensor::zeros(p.shape())?;
                for mv in m.data_mut() {
                    *mv = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
                }
                masks.push(m);
            }
            // Recompute head output with dropped probabilities.
            let bs = n / num_blocks;
            out = Tensor::zeros(&[n, d])?;
            for bi in 0..num_blocks {
                let bj = perm.map(bi);
                let mut p = attn.probs[bi].clone();
                for (a, m) in p.data_mut().iter_mut().zip(masks[bi].data()) {
                    *a *= m;
                }
                let vb = v.slice_rows(bj * bs, (bj + 1) * bs);
                let ob = matmul(&p, &vb)?;
                out.copy_rows_from(bi * bs, &ob);
            }
            drop_masks = Some(masks);
        }
        for r in 0..n {
            concat.row_mut(r)[h * d..(h + 1) * d].copy_from_slice(out.row(r));
        }
        head_caches.push(HeadCache {
            q,
            k,
            v,
            attn,
            dropout: drop_masks,
        });
    }
    let projected = matmul(&concat, &params.wo)?;
    Ok((
        projected,
        MhaCache {
            heads: head_caches,
            concat,
        },
    ))
}

pub struct MhaGrads {
    pub heads: Vec<HeadParams>,
    pub wo: Tensor,
}

/// Backward through blockwise multi-head attention. Returns the gradient with
/// respect to the layer input alongside parameter gradients.
pub fn mha_backward(
    x: &Tensor,
    params: &MultiHeadParams,
    cache: &MhaCache,
    num_blocks: usize,
    head_perms: &[Permutation],
    upstream: &Tensor,
) -> Result<(Tensor, MhaGrads)> {
    let n = x.shape()[0];
    let hidden = x.shape()[1];
    let num_heads = params.heads.len();
    let d = hidden / num_heads;

    let dwo = matmul_at(&cache.concat, upstream)?;
    let dconcat = matmul_bt(upstream, &params.wo)?;

    let mut dx = Tensor::zeros(&[n, hidden])?;
    let mut head_grads = Vec::with_capacity(num_heads);
    for (h, (hp, perm)) in params.heads.iter().zip(head_perms).enumerate() {
        let hc = &cache.heads[h];
        let mut dhead = Tensor::zeros(&[n, d])?;
        for r in 0..n {
            dhead.row_mut(r).copy_from_slice(&dconcat.row(r)[h * d..(h + 1) * d]);
        }
        let (dq, dk, dv) = blockwise_attention_backward_cached(
            &hc.q,
            &hc.k,
            &hc.v,
            &hc.attn,
            hc.dropout.as_deref(),
            num_blocks,
            perm,
            &dhead,
        )?;
        let dwq = matmul_at(x, &dq)?;
        let dwk = matmul_at(x, &dk)?;
        let dwv = matmul_at(x, &dv)?;
        dx.add_assign(&matmul_bt(&dq, &hp.wq)?)?;
        dx.add_assign(&matmul_bt(&dk, &hp.wk)?)?;
        dx.add_assign(&matmul_bt(&dv, &hp.wv)?)?;
        head_grads.push(HeadParams {
            wq: dwq,
            wk: dwk,
            wv: dwv,
        });
    }
    Ok((
        dx,
        MhaGrads {
            heads: head_grads,
            wo: dwo,
        },
    ))
}

/// Single-precision dense attention forward for the benchmark path.
pub fn attention_f32(q: &[f32], k: &[f32], v: &[f32], n: usize, d: usize) -> Vec<f32> {
    blockwise_attention_f32(q, k, v, n, d, 1, &Permutation::identity(1))
}

/// Single-precision blockwise attention forward for the benchmark path.
pub fn blockwise_attention_f32(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    n: usize,
    d: usize,
    num_blocks: usize,
    perm: &Permutation,
) -> Vec<f32> {
    assert_eq!(n % num_blocks, 0, "benchmark path requires n | N");
    let bs = n / num_blocks;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; n * d];
    let mut scores = vec![0.0f32; bs * bs];
    tracker().record_score_bytes(num_blocks * bs * bs * std::mem::size_of::<f32>());
    for bi in 0..num_blocks {
        let bj = perm.map(bi);
        for r in 0..bs {
            let qi = bi * bs + r;
            for c in 0..bs {
                let kj = bj * bs + c;
                let mut acc = 0.0f32;
                for t in 0..d {
                    acc += q[qi * d + t] * k[kj * d + t];
                }
                scores[r * bs + c] = acc * scale;
            }
        }
        for r in 0..bs {
            let row = &mut scores[r * bs..(r + 1) * bs];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = 1.0 / sum;
            for s in row.iter_mut() {
                *s *= inv;
            }
        }
        for r in 0..bs {
            let qi = bi * bs + r;
            for c in 0..bs {
                let p = scores[r * bs + c];
                let vj = bj * bs + c;
                for t in 0..d {
                    out[qi * d + t] += p * v[vj * d + t];
                }
            }
        }
    }
    out
}
