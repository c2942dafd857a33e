//! Optimizer, LR schedule, checkpointing, the training loop, and validation
//! perplexity.
//!
//! Checkpoints are versioned binary files: magic `BBLK`, a u32 format
//! version, a config block, the step counter, then every parameter tensor in
//! declaration order as rank + dims (u32s) followed by 64-bit little-endian
//! floats.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{apply_mlm_masking, MlmRow, PackedSequence, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::model::{mlm_loss, model_backward, model_forward, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::track::tracker;

const CHECKPOINT_MAGIC: &[u8; 4] = b"BBLK";
const CHECKPOINT_VERSION: u32 = 1;

/// Offset between consecutive per-step RNG seeds, so resuming from a
/// checkpoint at step s reproduces step s+1 bitwise.
pub const STEP_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn step_seed(base: u64, step: usize) -> u64 {
    base.wrapping_add((step as u64).wrapping_mul(STEP_SEED_STRIDE))
}

/// Adam moments plus the fixed hyperparameters: β₁ = 0.9, β₂ = 0.999,
/// ε = 1e-8, decoupled weight decay 0.01, global-norm gradient clip 1.0,
/// and a warmup-then-linear-decay learning-rate schedule.
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub max_steps: usize,
}

impl AdamState {
    pub fn new(
        params: &ModelParams,
        warmup_steps: usize,
        peak_lr: f64,
        max_steps: usize,
    ) -> Result<AdamState> {
        let m = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect::<Result<Vec<_>>>()?;
        let v = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdamState {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_steps,
            peak_lr,
            max_steps,
        })
    }

    /// Learning rate for 1-based step `t`: linear ramp to the peak over the
    /// warmup, then linear decay to zero at `max_steps`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            return self.peak_lr * t as f64 / self.warmup_steps as f64;
        }
        let decay_span = self.max_steps.saturating_sub(self.warmup_steps).max(1);
        let remaining = self.max_steps.saturating_sub(t);
        self.peak_lr * remaining as f64 / decay_span as f64
    }
}

/// Scale all gradients in place so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm_sq: f64 = grads
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            t.scale(scale);
        }
    }
    norm
}

/// One optimizer step: clip, bias-corrected Adam update, decoupled weight
/// decay. Returns the learning rate used.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &mut ModelParams,
    state: &mut AdamState,
) -> Result<f64> {
    if !grads.all_finite() {
        return Err(Error::Divergence {
            layer: usize::MAX,
            detail: "non-finite gradient".into(),
        });
    }
    clip_global_norm(grads, state.clip_norm);
    state.t += 1;
    let t = state.t;
    let lr = state.lr_at(t);
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    let gs = grads.tensors();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(gs)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, pv) in p.data_mut().iter_mut().enumerate() {
            let gv = g.data()[i];
            md[i] = state.beta1 * md[i] + (1.0 - state.beta1) * gv;
            vd[i] = state.beta2 * vd[i] + (1.0 - state.beta2) * gv * gv;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            *pv -= lr * (mhat / (vhat.sqrt() + state.eps) + state.weight_decay * *pv);
        }
    }
    Ok(lr)
}

/// Run-level knobs for the training loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub mask_rate: f64,
    pub seed: u64,
    pub val_interval: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be >= 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Argument("max steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One CSV log row: `step,loss,lr,tokens_per_sec,peak_act_bytes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
    pub peak_act_bytes: usize,
}

pub const LOG_HEADER: &str = "step,loss,lr,tokens_per_sec,peak_act_bytes";

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.3},{}\n",
            r.step, r.loss, r.lr, r.tokens_per_sec, r.peak_act_bytes
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Serialize config, step counter, and all parameters.
pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams,
    step: u64,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    write_u32(&mut w, CHECKPOINT_VERSION).map_err(io)?;
    for v in [
        config.layers,
        config.hidden,
        config.heads,
        config.seq_len,
        config.num_blocks,
        config.vocab_size,
    ] {
        write_u32(&mut w, v as u32).map_err(io)?;
    }
    w.write_all(&config.dropout.to_le_bytes()).map_err(io)?;
    w.write_all(&[config.tie_embeddings as u8]).map_err(io)?;
    let counts = config.assignment.counts();
    write_u32(&mut w, counts.len() as u32).map_err(io)?;
    for c in counts {
        write_u32(&mut w, c as u32).map_err(io)?;
    }
    w.write_all(&step.to_le_bytes()).map_err(io)?;
    for t in params.tensors() {
        write_u32(&mut w, t.rank() as u32).map_err(io)?;
        for &d in t.shape() {
            write_u32(&mut w, d as u32).map_err(io)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read back a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams, u64)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let io = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let layers = read_u32(&mut r).map_err(io)? as usize;
    let hidden = read_u32(&mut r).map_err(io)? as usize;
    let heads = read_u32(&mut r).map_err(io)? as usize;
    let seq_len = read_u32(&mut r).map_err(io)? as usize;
    let num_blocks = read_u32(&mut r).map_err(io)? as usize;
    let vocab_size = read_u32(&mut r).map_err(io)? as usize;
    let dropout = read_f64(&mut r).map_err(io)?;
    let mut tie = [0u8; 1];
    r.read_exact(&mut tie).map_err(io)?;
    let n_counts = read_u32(&mut r).map_err(io)? as usize;
    let mut counts = Vec::with_capacity(n_counts);
    for _ in 0..n_counts {
        counts.push(read_u32(&mut r).map_err(io)? as usize);
    }
    let assignment = crate::mask::HeadAssignment::from_counts(num_blocks, &counts)?;
    let mut config = ModelConfig::new(
        layers, hidden, heads, seq_len, num_blocks, vocab_size, assignment, dropout,
    )?;
    config.tie_embeddings = tie[0] != 0;
    let step = read_u64(&mut r).map_err(io)?;

    // Shapes come from the config; the stored rank/dims must agree.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(&config, &mut rng)?;
    for t in params.tensors_mut() {
        let rank = read_u32(&mut r).map_err(io)? as usize;
        if rank != t.rank() {
            return Err(bad(format!("tensor rank {rank} does not match config shape")));
        }
        for &expect in t.shape() {
            let got = read_u32(&mut r).map_err(io)? as usize;
            if got != expect {
                return Err(bad(format!("tensor dim {got}, config expects {expect}")));
            }
        }
        for v in t.data_mut() {
            *v = read_f64(&mut r).map_err(io)?;
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(io)? != 0 {
        return Err(bad("trailing bytes after parameters".into()));
    }
    Ok((config, params, step))
}

/// Deterministic training over pre-packed sequences. Runs steps
/// `start_step+1 ..= max_steps`; each step draws its batch, corruption, and
/// dropout from an RNG seeded by the base seed and the step index alone, so a
/// resumed run reproduces the original bitwise. Writes a checkpoint every
/// `val_interval` steps (and at the end) when a directory is given. A
/// non-finite loss saves the last good parameters and aborts.
pub fn train_loop(
    sequences: &[PackedSequence],
    config: &ModelConfig,
    params: &mut ModelParams,
    opt: &mut AdamState,
    tconfig: &TrainConfig,
    start_step: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<LogRow>> {
    tconfig.validate()?;
    let usable: Vec<&PackedSequence> = sequences
        .iter()
        .filter(|s| {
            s.ids
                .iter()
                .zip(&s.attention_allowed)
                .any(|(&id, &ok)| ok && id >= RESERVED_TOKENS)
        })
        .collect();
    if usable.len() < sequences.len() {
        eprintln!(
            "warning: skipping {} sequence(s) with no maskable positions",
            sequences.len() - usable.len()
        );
    }
    if usable.is_empty() {
        return Err(Error::Argument("no trainable sequences in corpus".into()));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let save = |params: &ModelParams, step: usize| -> Result<Option<PathBuf>> {
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("step_{step:06}.ckpt"));
            save_checkpoint(&path, config, params, step as u64)?;
            return Ok(Some(path));
        }
        Ok(None)
    };

    let trk = tracker();
    let was_enabled = trk.is_enabled();
    trk.enable();
    let mut log = Vec::new();
    for step in start_step + 1..=tconfig.max_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(tconfig.seed, step));
        let mut ids = Vec::with_capacity(tconfig.batch_size);
        let mut targets = Vec::with_capacity(tconfig.batch_size);
        let mut loss_mask = Vec::with_capacity(tconfig.batch_size);
        for _ in 0..tconfig.batch_size {
            let seq = usable[rng.gen_range(0..usable.len())];
            let row: MlmRow =
                apply_mlm_masking(seq, tconfig.mask_rate, config.vocab_size, rng.gen())?;
            ids.push(row.input_ids);
            targets.push(row.target_ids);
            loss_mask.push(row.loss_mask);
        }

        let started = Instant::now();
        let baseline = trk.live_bytes();
        trk.reset_peak();
        let (loss, lr) = {
            let (logits, cache) = model_forward(&ids, params, config, true, Some(&mut rng))?;
            let (loss, dlogits) = mlm_loss(&logits, &targets, &loss_mask)?;
            if !loss.is_finite() {
                save(params, step - 1)?;
                return Err(Error::Divergence {
                    layer: usize::MAX,
                    detail: format!("loss became non-finite at step {step}; last good checkpoint saved"),
                });
            }
            let mut grads = model_backward(&ids, params, config, &cache, &dlogits)?;
            let lr = adam_step(params, &mut grads, opt)?;
            (loss, lr)
        };
        let peak_act_bytes = trk.peak_bytes().saturating_sub(baseline);
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        log.push(LogRow {
            step,
            loss,
            lr,
            tokens_per_sec: (tconfig.batch_size * config.seq_len) as f64 / elapsed,
            peak_act_bytes,
        });
        if step % tconfig.val_interval.max(1) == 0 || step == tconfig.max_steps {
            save(params, step)?;
        }
    }
    if !was_enabled {
        trk.disable();
    }
    Ok(log)
}

/// exp(mean masked cross-entropy) over held-out corrupted rows, in eval mode.
pub fn validation_perplexity(
    params: &ModelParams,
    config: &ModelConfig,
    rows: &[MlmRow],
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Argument("validation requires at least one row".into()));
    }
    let ids: Vec<Vec<usize>> = rows.iter().map(|r| r.input_ids.clone()).collect();
    let targets: Vec<Vec<usize>> = rows.iter().map(|r| r.target_ids.clone()).collect();
    let mask: Vec<Vec<bool>> = rows.iter().map(|r| r.loss_mask.clone()).collect();
    let (logits, _) = model_forward(&ids, params, config, false, None)?;
    let (loss, _) = mlm_loss(&logits, &targets, &mask)?;
    Ok(loss.exp())
}
