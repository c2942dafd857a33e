//! A toy BERT-style masked-language-model encoder built on blockwise
//! attention: token + learned position embeddings, L post-layernorm encoder
//! layers (blockwise multi-head attention, then a 4H GELU feed-forward), and
//! a vocabulary projection head. Backward is fully hand-derived.
//!
//! Batches are lists of sequences; each sequence flows through rank-2 tensors
//! of shape N x H.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{mha_backward, mha_forward, MhaCache, MultiHeadParams};
use crate::error::{Error, Result};
use crate::mask::HeadAssignment;
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, layer_norm_backward, layer_norm_cached, matmul, matmul_at,
    matmul_bt, LayerNormCache, Tensor,
};

/// Layer-norm epsilon (BERT's value).
pub const LN_EPS: f64 = 1e-12;
/// Gaussian init standard deviation (BERT's value).
pub const INIT_STD: f64 = 0.02;

/// Model shape. The feed-forward hidden width is fixed at 4H.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub num_blocks: usize,
    pub vocab_size: usize,
    pub assignment: HeadAssignment,
    pub dropout: f64,
    /// Tie the output projection to the token embedding matrix.
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn new(
        layers: usize,
        hidden: usize,
        heads: usize,
        seq_len: usize,
        num_blocks: usize,
        vocab_size: usize,
        assignment: HeadAssignment,
        dropout: f64,
    ) -> Result<ModelConfig> {
        if layers == 0 || hidden == 0 || heads == 0 || seq_len == 0 || vocab_size == 0 {
            return Err(Error::Argument("model dimensions must be positive".into()));
        }
        if hidden % heads != 0 {
            return Err(Error::Argument(format!(
                "head count {heads} must divide hidden size {hidden}"
            )));
        }
        if num_blocks == 0 || seq_len % num_blocks != 0 {
            return Err(Error::Argument(format!(
                "block count {num_blocks} must divide sequence length {seq_len}"
            )));
        }
        if assignment.total_heads() != heads {
            return Err(Error::Argument(format!(
                "head assignment covers {} heads, model has {heads}",
                assignment.total_heads()
            )));
        }
        if assignment.num_blocks() != num_blocks {
            return Err(Error::Argument(format!(
                "head assignment is over {} blocks, model uses {num_blocks}",
                assignment.num_blocks()
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Argument(format!("dropout must be in [0, 1), got {dropout}")));
        }
        Ok(ModelConfig {
            layers,
            hidden,
            heads,
            seq_len,
            num_blocks,
            vocab_size,
            assignment,
            dropout,
            tie_embeddings: false,
        })
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.hidden
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn block_size(&self) -> usize {
        self.seq_len / self.num_blocks
    }
}

/// Parameters for one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn: MultiHeadParams,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl LayerParams {
    fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<LayerParams> {
        let h = config.hidden;
        let f = config.ffn_hidden();
        Ok(LayerParams {
            attn: MultiHeadParams::init(h, config.heads, INIT_STD, rng)?,
            ln1_gamma: Tensor::full(&[h], 1.0)?,
            ln1_beta: Tensor::zeros(&[h])?,
            w1: Tensor::randn(&[h, f], INIT_STD, rng)?,
            b1: Tensor::zeros(&[f])?,
            w2: Tensor::randn(&[f, h], INIT_STD, rng)?,
            b2: Tensor::zeros(&[h])?,
            ln2_gamma: Tensor::full(&[h], 1.0)?,
            ln2_beta: Tensor::zeros(&[h])?,
        })
    }

    fn zeros_like(&self) -> Result<LayerParams> {
        Ok(LayerParams {
            attn: MultiHeadParams {
                heads: self
                    .attn
                    .heads
                    .iter()
                    .map(|hp| {
                        Ok(crate::attention::HeadParams {
                            wq: Tensor::zeros(hp.wq.shape())?,
                            wk: Tensor::zeros(hp.wk.shape())?,
                            wv: Tensor::zeros(hp.wv.shape())?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
                wo: Tensor::zeros(self.attn.wo.shape())?,
            },
            ln1_gamma: Tensor::zeros(self.ln1_gamma.shape())?,
            ln1_beta: Tensor::zeros(self.ln1_beta.shape())?,
            w1: Tensor::zeros(self.w1.shape())?,
            b1: Tensor::zeros(self.b1.shape())?,
            w2: Tensor::zeros(self.w2.shape())?,
            b2: Tensor::zeros(self.b2.shape())?,
            ln2_gamma: Tensor::zeros(self.ln2_gamma.shape())?,
            ln2_beta: Tensor::zeros(self.ln2_beta.shape())?,
        })
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for hp in &self.attn.heads {
            v.extend([&hp.wq, &hp.wk, &hp.wv]);
        }
        v.push(&self.attn.wo);
        v.extend([
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for hp in &mut self.attn.heads {
            v.push(&mut hp.wq);
            v.push(&mut hp.wk);
            v.push(&mut hp.wv);
        }
        v.push(&mut self.attn.wo);
        v.push(&mut self.ln1_gamma);
        v.push(&mut self.ln1_beta);
        v.push(&mut self.w1);
        v.push(&mut self.b1);
        v.push(&mut self.w2);
        v.push(&mut self.b2);
        v.push(&mut self.ln2_gamma);
        v.push(&mut self.ln2_beta);
        v
    }
}

/// All trainable tensors. Gradients reuse this struct with matching shapes.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<ModelParams> {
        let h = config.hidden;
        let v = config.vocab_size;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams::init(config, rng)?);
        }
        Ok(ModelParams {
            tok_emb: Tensor::randn(&[v, h], INIT_STD, rng)?,
            pos_emb: Tensor::randn(&[config.seq_len, h], INIT_STD, rng)?,
            layers,
            out_w: Tensor::randn(&[h, v], INIT_STD, rng)?,
            out_b: Tensor::zeros(&[v])?,
        })
    }

    pub fn zeros_like(&self) -> Result<ModelParams> {
        Ok(ModelParams {
            tok_emb: Tensor::zeros(self.tok_emb.shape())?,
            pos_emb: Tensor::zeros(self.pos_emb.shape())?,
            layers: self
                .layers
                .iter()
                .map(|l| l.zeros_like())
                .collect::<Result<Vec<_>>>()?,
            out_w: Tensor::zeros(self.out_w.shape())?,
            out_b: Tensor::zeros(self.out_b.shape())?,
        })
    }

    /// All parameter tensors in declaration order. This order defines the
    /// checkpoint layout and the optimizer-state pairing.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.push(&self.out_w);
        v.push(&self.out_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Elementwise `self += other` over every tensor.
    pub fn add_assign(&mut self, other: &ModelParams) -> Result<()> {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.add_assign(s)?;
        }
        Ok(())
    }
}

fn add_bias(x: &mut Tensor, b: &Tensor) {
    let cols = x.cols();
    debug_assert_eq!(cols, b.len());
    for r in 0..x.rows() {
        for (v, bv) in x.row_mut(r).iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
}

fn col_sums(x: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[x.cols()])?;
    for r in 0..x.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    Ok(out)
}

/// Everything one encoder layer's backward pass needs.
pub struct LayerCache {
    pub x: Tensor,
    pub mha: MhaCache,
    pub ln1: LayerNormCache,
    pub ln1_out: Tensor,
    pub pre_act: Tensor,
    pub act: Tensor,
    pub ln2: LayerNormCache,
}

/// One post-layernorm encoder layer: blockwise multi-head attention with a
/// residual connection and layer norm, then a GELU feed-forward with another
/// residual and layer norm.
pub fn encoder_layer_forward(
    x: &Tensor,
    lp: &LayerParams,
    config: &ModelConfig,
    layer_index: usize,
    train_mode: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, LayerCache)> {
    let perms = config.assignment.expand();
    let dropout = if train_mode { config.dropout } else { 0.0 };
    let (attn_out, mha) = mha_forward(
        x,
        &lp.attn,
        config.num_blocks,
        &perms,
        dropout,
        rng.as_deref_mut(),
    )?;
    let h1 = x.add(&attn_out)?;
    let (ln1_out, ln1) = layer_norm_cached(&h1, &lp.ln1_gamma, &lp.ln1_beta, LN_EPS)?;

    let mut pre_act = matmul(&ln1_out, &lp.w1)?;
    add_bias(&mut pre_act, &lp.b1);
    let mut act = pre_act.clone();
    for v in act.data_mut() {
        *v = gelu_scalar(*v);
    }
    let mut ffn_out = matmul(&act, &lp.w2)?;
    add_bias(&mut ffn_out, &lp.b2);

    let h2 = ln1_out.add(&ffn_out)?;
    let (out, ln2) = layer_norm_cached(&h2, &lp.ln2_gamma, &lp.ln2_beta, LN_EPS)?;
    if !out.all_finite() {
        return Err(Error::Divergence {
            layer: layer_index,
            detail: "non-finite activation in encoder layer output".into(),
        });
    }
    Ok((
        out,
        LayerCache {
            x: x.clone(),
            mha,
            ln1,
            ln1_out,
            pre_act,
            act,
            ln2,
        },
    ))
}

/// Backward through one encoder layer. Returns the gradient with respect to
/// the layer input plus parameter gradients.
pub fn encoder_layer_backward(
    lp: &LayerParams,
    config: &ModelConfig,
    cache: &LayerCache,
    dy: &Tensor,
) -> Result<(Tensor, LayerParams)> {
    let mut grads = lp.zeros_like()?;
    let perms = config.assignment.expand();

    // Second layer norm.
    let (dh2, dg2, db2_ln) = layer_norm_backward(dy, &lp.ln2_gamma, &cache.ln2)?;
    grads.ln2_gamma = dg2;
    grads.ln2_beta = db2_ln;

    // h2 = ln1_out + ffn_out: the residual copies dh2 to both branches.
    grads.b2 = col_sums(&dh2)?;
    grads.w2 = matmul_at(&cache.act, &dh2)?;
    let mut dact = matmul_bt(&dh2, &lp.w2)?;
    for (d, a) in dact.data_mut().iter_mut().zip(cache.pre_act.data()) {
        *d *= gelu_grad_scalar(*a);
    }
    grads.b1 = col_sums(&dact)?;
    grads.w1 = matmul_at(&cache.ln1_out, &dact)?;
    let mut d_ln1_out = matmul_bt(&dact, &lp.w1)?;
    d_ln1_out.add_assign(&dh2)?;

    // First layer norm.
    let (dh1, dg1, db1_ln) = layer_norm_backward(&d_ln1_out, &lp.ln1_gamma, &cache.ln1)?;
    grads.ln1_gamma = dg1;
    grads.ln1_beta = db1_ln;

    // h1 = x + attn_out.
    let (dx_attn, attn_grads) = mha_backward(
        &cache.x,
        &lp.attn,
        &cache.mha,
        config.num_blocks,
        &perms,
        &dh1,
    )?;
    grads.attn.heads = attn_grads.heads;
    grads.attn.wo = attn_grads.wo;

    let mut dx = dh1;
    dx.add_assign(&dx_attn)?;
    Ok((dx, grads))
}

pub struct SeqCache {
    pub x0: Tensor,
    pub layers: Vec<LayerCache>,
    pub hidden: Tensor,
}

pub struct ModelCache {
    pub seqs: Vec<SeqCache>,
}

/// Embeddings -> L encoder layers -> vocabulary logits, per sequence.
/// Returns one `N x V` logits tensor per input sequence and, in train mode,
/// the caches backward needs.
pub fn model_forward(
    ids: &[Vec<usize>],
    params: &ModelParams,
    config: &ModelConfig,
    train_mode: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<Tensor>, ModelCache)> {
    let h = config.hidden;
    let n = config.seq_len;
    let mut all_logits = Vec::with_capacity(ids.len());
    let mut seq_caches = Vec::with_capacity(ids.len());
    for seq in ids {
        if seq.len() != n {
            return Err(Error::Argument(format!(
                "sequence length {} does not match configured N={n}",
                seq.len()
            )));
        }
        let mut x = Tensor::zeros(&[n, h])?;
        for (i, &id) in seq.iter().enumerate() {
            if id >= config.vocab_size {
                return Err(Error::Argument(format!(
                    "token id {id} out of range for vocab size {}",
                    config.vocab_size
                )));
            }
            let row = x.row_mut(i);
            for j in 0..h {
                row[j] = params.tok_emb.get2(id, j) + params.pos_emb.get2(i, j);
            }
        }
        let x0 = x.clone();
        let mut layer_caches = Vec::with_capacity(config.layers);
        for (l, lp) in params.layers.iter().enumerate() {
            let (out, cache) =
                encoder_layer_forward(&x, lp, config, l, train_mode, rng.as_deref_mut())?;
            layer_caches.push(cache);
            x = out;
        }
        let mut logits = if config.tie_embeddings {
            matmul_bt(&x, &params.tok_emb)?
        } else {
            matmul(&x, &params.out_w)?
        };
        add_bias(&mut logits, &params.out_b);
        all_logits.push(logits);
        seq_caches.push(SeqCache {
            x0,
            layers: layer_caches,
            hidden: x,
        });
    }
    Ok((all_logits, ModelCache { seqs: seq_caches }))
}

/// Mean masked-token cross-entropy over the batch plus its gradient with
/// respect to the logits. Positions with `loss_mask` false contribute nothing.
pub fn mlm_loss(
    logits: &[Tensor],
    targets: &[Vec<usize>],
    loss_mask: &[Vec<bool>],
) -> Result<(f64, Vec<Tensor>)> {
    if logits.len() != targets.len() || logits.len() != loss_mask.len() {
        return Err(Error::Argument("loss inputs must have equal batch size".into()));
    }
    let count: usize = loss_mask
        .iter()
        .map(|m| m.iter().filter(|&&b| b).count())
        .sum();
    if count == 0 {
        return Err(Error::Argument("loss requires at least one masked position".into()));
    }
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(logits.len());
    for ((lg, tg), lm) in logits.iter().zip(targets).zip(loss_mask) {
        let v = lg.cols();
        let mut dl = Tensor::zeros(lg.shape())?;
        for i in 0..lg.rows() {
            if !lm[i] {
                continue;
            }
            let row = lg.row(i);
            let t = tg[i];
            if t >= v {
                return Err(Error::Argument(format!("target id {t} out of range")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            let drow = dl.row_mut(i);
            for j in 0..v {
                drow[j] = (row[j] - lse).exp() / count as f64;
            }
            drow[t] -= 1.0 / count as f64;
        }
        dlogits.push(dl);
    }
    Ok((loss / count as f64, dlogits))
}

/// Exact analytic gradients for every parameter, given the forward caches and
/// the logits gradient.
pub fn model_backward(
    ids: &[Vec<usize>],
    params: &ModelParams,
    config: &ModelConfig,
    cache: &ModelCache,
    dlogits: &[Tensor],
) -> Result<ModelParams> {
    if cache.seqs.len() != dlogits.len() || cache.seqs.len() != ids.len() {
        return Err(Error::Argument(
            "cache, ids, and logits gradients must cover the same batch".into(),
        ));
    }
    let mut grads = params.zeros_like()?;
    for ((seq, sc), dl) in ids.iter().zip(&cache.seqs).zip(dlogits) {
        // Output head.
        let mut dx = if config.tie_embeddings {
            grads.tok_emb.add_assign(&matmul_at(dl, &sc.hidden)?)?;
            matmul(dl, &params.tok_emb)?
        } else {
            grads.out_w.add_assign(&matmul_at(&sc.hidden, dl)?)?;
            matmul_bt(dl, &params.out_w)?
        };
        grads.out_b.add_assign(&col_sums(dl)?)?;

        // Encoder stack, in reverse.
        for l in (0..config.layers).rev() {
            let (dx_prev, lg) =
                encoder_layer_backward(&params.layers[l], config, &sc.layers[l], &dx)?;
            let dst = grads.layers[l].tensors_mut();
            for (d, s) in dst.into_iter().zip(lg.tensors()) {
                d.add_assign(s)?;
            }
            dx = dx_prev;
        }

        // Embeddings.
        for (i, &id) in seq.iter().enumerate() {
            let drow = dx.row(i).to_vec();
            for (j, g) in drow.iter().enumerate() {
                let v = grads.tok_emb.get2(id, j) + g;
                grads.tok_emb.set2(id, j, v);
                let p = grads.pos_emb.get2(i, j) + g;
                grads.pos_emb.set2(i, j, p);
            }
        }
    }
    Ok(grads)
}
