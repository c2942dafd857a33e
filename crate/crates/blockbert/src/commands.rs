//! Subcommand implementations for the `blockbert` binary.

use std::collections::HashMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blockbert::attention::{
    blockwise_attention, blockwise_attention_backward, blockwise_attention_f32, masked_attention,
};
use blockbert::cost::{
    attention_flops, measure_model_activation, regress_activation, report_csv, report_table,
    ReportRow, FLOPS_NOTE,
};
use blockbert::data::{
    apply_mlm_masking, copy_task_corpus, markov_corpus, pack_sequences, split_documents, MlmRow,
    PackedSequence, Vocab, RESERVED_TOKENS,
};
use blockbert::error::{Error, Result};
use blockbert::mask::{
    build_block_mask, build_sparse_fixed_mask, enumerate_assignments, mask_density,
    shift_permutation, BlockMaskSpec, HeadAssignment, Mask, MaskFormat, Permutation,
    SparseFixedMaskSpec,
};
use blockbert::model::{ModelConfig, ModelParams};
use blockbert::tensor::Tensor;
use blockbert::track::{tracker, OomSimulated};
use blockbert::train::{
    load_checkpoint, train_loop, validation_perplexity, write_log_csv, AdamState, TrainConfig,
};

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a block-permutation or sparse-fixed attention mask.
    Mask(MaskArgs),
    /// Audit blockwise attention against dense masked attention.
    Equiv(EquivArgs),
    /// Time attention forward (and optionally backward) passes.
    Bench(BenchArgs),
    /// Fit the quadratic/linear activation-memory split at fixed b*N.
    Regress(RegressArgs),
    /// Sweep head assignments on a corpus and rank them by validation loss.
    Ablate(AblateArgs),
    /// Train the toy masked-language-model encoder.
    Train(TrainArgs),
    /// Evaluate a checkpoint's validation perplexity on a corpus.
    Eval(EvalArgs),
    /// Write a seeded synthetic corpus.
    GenCorpus(GenCorpusArgs),
}

pub fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Mask(a) => cmd_mask(a),
        Cmd::Equiv(a) => cmd_equiv(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Regress(a) => cmd_regress(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::GenCorpus(a) => cmd_gen_corpus(a),
    }
}

/// Seed resolution: flag, then the BLOCKBERT_SEED environment variable, then
/// a fixed default.
fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("BLOCKBERT_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Parse(format!("BLOCKBERT_SEED is not an integer: {v}"))),
        Err(_) => Ok(42),
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("invalid {what} list entry: {p:?}")))
        })
        .collect()
}

fn parse_perm(s: &str) -> Result<Permutation> {
    let values = parse_list(s, "permutation")?;
    Permutation::from_one_based(&values)
}

// ---------------------------------------------------------------------------
// mask

#[derive(Args)]
pub struct MaskArgs {
    #[arg(long)]
    seq_len: usize,
    /// Number of blocks (permutation masks).
    #[arg(long)]
    blocks: Option<usize>,
    /// One-based block permutation, e.g. "2,3,1".
    #[arg(long)]
    perm: Option<String>,
    /// Build the Sparse-Transformer bidirectional fixed mask instead.
    #[arg(long, default_value_t = false)]
    sparse_fixed: bool,
    /// Stride (window length) for the sparse-fixed mask.
    #[arg(long)]
    stride: Option<usize>,
    /// Expressivity (summary width) for the sparse-fixed mask.
    #[arg(long)]
    expressivity: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["csv", "pbm"], default_value = "csv")]
    format: String,
}

fn cmd_mask(a: MaskArgs) -> Result<u8> {
    let mask: Mask = if a.sparse_fixed {
        let stride = a
            .stride
            .ok_or_else(|| Error::Argument("--sparse-fixed requires --stride".into()))?;
        let expr = a
            .expressivity
            .ok_or_else(|| Error::Argument("--sparse-fixed requires --expressivity".into()))?;
        build_sparse_fixed_mask(&SparseFixedMaskSpec::new(a.seq_len, stride, expr)?)
    } else {
        let blocks = a
            .blocks
            .ok_or_else(|| Error::Argument("permutation masks require --blocks".into()))?;
        let perm = match &a.perm {
            Some(p) => parse_perm(p)?,
            None if blocks == 1 => Permutation::identity(1),
            None => shift_permutation(blocks, 1)?,
        };
        build_block_mask(&BlockMaskSpec::new(a.seq_len, blocks, perm)?)
    };
    if let Some(out) = &a.out {
        let format = if a.format == "pbm" { MaskFormat::Pbm } else { MaskFormat::Csv };
        mask.save(out, format)?;
        println!("wrote {}", out.display());
    }
    println!("density: {:.6}", mask_density(&mask));
    Ok(0)
}

// ---------------------------------------------------------------------------
// equiv

#[derive(Args)]
pub struct EquivArgs {
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Corrupt one output entry to verify the harness catches regressions.
    #[arg(long, hide = true, default_value_t = false)]
    inject_error: bool,
}

fn cmd_equiv(a: EquivArgs) -> Result<u8> {
    if a.blocks == 0 || a.seq_len % a.blocks != 0 {
        return Err(Error::Argument(format!(
            "block count {} must divide sequence length {}",
            a.blocks, a.seq_len
        )));
    }
    let seed = resolve_seed(a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_dev: f64 = 0.0;
    for trial in 0..a.trials {
        let perm = if a.blocks == 1 {
            Permutation::identity(1)
        } else {
            shift_permutation(a.blocks, 1 + trial % a.blocks)?
        };
        let q = Tensor::randn(&[a.seq_len, a.head_dim], 1.0, &mut rng)?;
        let k = Tensor::randn(&[a.seq_len, a.head_dim], 1.0, &mut rng)?;
        let v = Tensor::randn(&[a.seq_len, a.head_dim], 1.0, &mut rng)?;
        let mut block = blockwise_attention(&q, &k, &v, a.blocks, &perm)?;
        if a.inject_error && trial == 0 {
            block.data_mut()[0] += 1e-6;
        }
        let mask = build_block_mask(&BlockMaskSpec::new(a.seq_len, a.blocks, perm)?);
        let dense = masked_attention(&q, &k, &v, &mask)?;
        for (b, d) in block.data().iter().zip(dense.data()) {
            max_dev = max_dev.max((b - d).abs());
        }
    }
    println!("max abs deviation over {} trials: {max_dev:.3e}", a.trials);
    if max_dev <= 1e-10 {
        println!("PASS");
        Ok(0)
    } else {
        println!("FAIL (tolerance 1e-10)");
        Ok(1)
    }
}

// ---------------------------------------------------------------------------
// bench

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "512,1024,2048")]
    seq_lens: String,
    #[arg(long, default_value = "1,2,3")]
    blocks: String,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    /// Also run the hand-derived backward pass.
    #[arg(long, default_value_t = false)]
    backward: bool,
    /// Use the single-precision kernel (timing only).
    #[arg(long, default_value_t = false)]
    f32: bool,
    /// Simulated memory budget; rows exceeding it are marked OOM.
    #[arg(long)]
    budget_bytes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn bench_row(
    a: &BenchArgs,
    seq_len: usize,
    blocks: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let perm = if blocks == 1 {
        Permutation::identity(1)
    } else {
        shift_permutation(blocks, 1)?
    };
    let trk = tracker();
    if a.f32 {
        let len = seq_len * a.head_dim;
        let q: Vec<f32> = (0..len).map(|_| rng.gen::<f32>() - 0.5).collect();
        let k: Vec<f32> = (0..len).map(|_| rng.gen::<f32>() - 0.5).collect();
        let v: Vec<f32> = (0..len).map(|_| rng.gen::<f32>() - 0.5).collect();
        let started = Instant::now();
        for _ in 0..a.repeat {
            for _ in 0..a.batch {
                for _ in 0..a.heads {
                    std::hint::black_box(blockwise_attention_f32(
                        &q, &k, &v, seq_len, a.head_dim, blocks, &perm,
                    ));
                }
            }
        }
        let per = started.elapsed().as_secs_f64() * 1000.0 / a.repeat as f64;
        return Ok((per, 0));
    }
    let q = Tensor::randn(&[seq_len, a.head_dim], 1.0, rng)?;
    let k = Tensor::randn(&[seq_len, a.head_dim], 1.0, rng)?;
    let v = Tensor::randn(&[seq_len, a.head_dim], 1.0, rng)?;
    let baseline = trk.live_bytes();
    trk.reset_peak();
    let started = Instant::now();
    for _ in 0..a.repeat {
        for _ in 0..a.batch {
            for _ in 0..a.heads {
                let out = blockwise_attention(&q, &k, &v, blocks, &perm)?;
                if a.backward {
                    blockwise_attention_backward(&q, &k, &v, blocks, &perm, &out)?;
                }
            }
        }
    }
    let per = started.elapsed().as_secs_f64() * 1000.0 / a.repeat as f64;
    let peak = trk.peak_bytes().saturating_sub(baseline);
    Ok((per, peak))
}

fn cmd_bench(a: BenchArgs) -> Result<u8> {
    let seq_lens = parse_list(&a.seq_lens, "sequence length")?;
    let blocks_list = parse_list(&a.blocks, "block count")?;
    let seed = resolve_seed(a.seed)?;
    let trk = tracker();
    trk.enable();
    trk.reset();
    trk.set_budget(a.budget_bytes);

    let mut rows: Vec<ReportRow> = Vec::new();
    println!("{FLOPS_NOTE}");
    for &n in &seq_lens {
        for &blocks in &blocks_list {
            let label = if a.backward { "fwd+bwd" } else { "fwd" };
            let label = if a.f32 { format!("{label}-f32") } else { label.to_string() };
            if blocks == 0 || n % blocks != 0 {
                eprintln!("skipping N={n}, n={blocks}: block count must divide N");
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // The budget is enforced by a panic from the tracker; catch it and
            // mark the row instead of aborting the sweep.
            let hook = panic::take_hook();
            panic::set_hook(Box::new(|_| {}));
            let result = panic::catch_unwind(AssertUnwindSafe(|| bench_row(&a, n, blocks, &mut rng)));
            panic::set_hook(hook);
            let push = |rows: &mut Vec<ReportRow>, metric: &str, value: String| {
                rows.push(ReportRow {
                    config: label.clone(),
                    seq_len: n,
                    num_blocks: blocks,
                    metric: metric.into(),
                    value,
                });
            };
            match result {
                Ok(r) => {
                    let (ms, peak) = r?;
                    push(&mut rows, "time_ms", format!("{ms:.3}"));
                    push(&mut rows, "peak_act_bytes", peak.to_string());
                    let flops =
                        attention_flops(n, a.head_dim, a.heads, 1, blocks)? * a.batch as u64;
                    push(&mut rows, "attention_flops", flops.to_string());
                }
                Err(payload) => {
                    if payload.downcast_ref::<OomSimulated>().is_none() {
                        panic::resume_unwind(payload);
                    }
                    push(&mut rows, "time_ms", "OOM".into());
                    push(&mut rows, "peak_act_bytes", "OOM".into());
                }
            }
        }
    }
    trk.set_budget(None);
    trk.disable();
    print!("{}", report_table(&rows));
    if let Some(path) = &a.csv {
        std::fs::write(path, report_csv(&rows)).map_err(|e| Error::io(path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// regress

#[derive(Args)]
pub struct RegressArgs {
    #[arg(long, default_value_t = 4096)]
    tokens_per_batch: usize,
    #[arg(long, default_value = "128,256,512")]
    seq_lens: String,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    /// Fit synthetic points from a known polynomial instead of measuring.
    #[arg(long, default_value_t = false)]
    synthetic: bool,
    #[arg(long)]
    seed: Option<u64>,
}

fn balanced_assignment(num_blocks: usize, heads: usize) -> Result<HeadAssignment> {
    let mut counts = vec![heads / num_blocks; num_blocks];
    for c in counts.iter_mut().take(heads % num_blocks) {
        *c += 1;
    }
    HeadAssignment::from_counts(num_blocks, &counts)
}

fn cmd_regress(a: RegressArgs) -> Result<u8> {
    let seq_lens = parse_list(&a.seq_lens, "sequence length")?;
    if seq_lens.len() < 3 {
        return Err(Error::Argument(format!(
            "regression needs at least 3 sequence lengths, got {}",
            seq_lens.len()
        )));
    }
    if a.synthetic {
        let (a2, a1, a0) = (3.5, 200.0, 1.0e6);
        let tokens = a.tokens_per_batch as f64;
        let points: Vec<(usize, usize, f64)> = seq_lens
            .iter()
            .map(|&n| {
                let b = a.tokens_per_batch / n;
                (n, b, a2 * tokens * n as f64 + a1 * tokens + a0)
            })
            .collect();
        let fit = regress_activation(&points)?;
        println!("synthetic polynomial: a2={a2}, a1={a1}, a0={a0} at b*N={tokens}");
        println!(
            "recovered: a2={:.12}, combined linear={:.6}, R^2={:.12}",
            fit.a2, fit.combined_linear, fit.r_squared
        );
        if (fit.a2 - a2).abs() < 1e-9 {
            println!("exact recovery: PASS");
            return Ok(0);
        }
        println!("exact recovery: FAIL");
        return Ok(1);
    }

    let seed = resolve_seed(a.seed)?;
    let mut points = Vec::new();
    for &n in &seq_lens {
        if a.tokens_per_batch % n != 0 {
            return Err(Error::Argument(format!(
                "sequence length {n} does not divide tokens-per-batch {}",
                a.tokens_per_batch
            )));
        }
        if n % a.blocks != 0 {
            return Err(Error::Argument(format!(
                "block count {} must divide sequence length {n}",
                a.blocks
            )));
        }
        let b = a.tokens_per_batch / n;
        let assignment = balanced_assignment(a.blocks, a.heads)?;
        let config = ModelConfig::new(
            a.layers, a.hidden, a.heads, n, a.blocks, a.vocab, assignment, 0.0,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng)?;
        let seq: Vec<usize> = (0..n)
            .map(|i| RESERVED_TOKENS + i % (a.vocab - RESERVED_TOKENS))
            .collect();
        let ids = vec![seq; b];
        let bytes = measure_model_activation(&params, &config, &ids)?;
        println!("measured: N={n:5}  b={b:3}  activation_bytes={bytes}");
        points.push((n, b, bytes as f64));
    }
    let fit = regress_activation(&points)?;
    println!(
        "fit at b*N={}: slope={:.3} bytes/N (a2={:.6e}), combined linear={:.3} bytes, R^2={:.6}",
        fit.tokens_per_batch,
        fit.slope(),
        fit.a2,
        fit.combined_linear,
        fit.r_squared
    );
    println!("estimated split by block count:");
    let mut rows = Vec::new();
    for &n in &seq_lens {
        for blocks in [1usize, 2, 3] {
            rows.push(ReportRow {
                config: "measured-fit".into(),
                seq_len: n,
                num_blocks: blocks,
                metric: "quadratic_bytes".into(),
                value: format!("{:.0}", fit.slope() * n as f64 / blocks as f64),
            });
        }
        rows.push(ReportRow {
            config: "measured-fit".into(),
            seq_len: n,
            num_blocks: 1,
            metric: "linear_bytes".into(),
            value: format!("{:.0}", fit.combined_linear),
        });
    }
    print!("{}", report_table(&rows));
    Ok(0)
}

// ---------------------------------------------------------------------------
// corpus / config plumbing shared by ablate, train, eval

fn load_corpus(path: &Path, vocab_size: usize, seq_len: usize) -> Result<(Vocab, Vec<PackedSequence>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab = Vocab::build(&text, vocab_size)?;
    let docs: Vec<Vec<usize>> = split_documents(&text)
        .iter()
        .map(|d| d.iter().map(|t| vocab.id(t)).collect())
        .collect();
    let seqs = pack_sequences(&docs, seq_len)?;
    Ok((vocab, seqs))
}

fn validation_rows(
    seqs: &[PackedSequence],
    mask_rate: f64,
    vocab_size: usize,
    seed: u64,
    limit: usize,
) -> Vec<MlmRow> {
    seqs.iter()
        .take(limit)
        .enumerate()
        .filter_map(|(i, s)| {
            apply_mlm_masking(s, mask_rate, vocab_size, seed ^ (i as u64 + 1)).ok()
        })
        .collect()
}

/// `key = value` lines with `#` comments; unknown keys are rejected.
fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    const KNOWN: &[&str] = &[
        "layers",
        "hidden",
        "heads",
        "seq_len",
        "blocks",
        "vocab",
        "dropout",
        "assignment",
        "tie_embeddings",
        "batch_size",
        "steps",
        "warmup",
        "peak_lr",
        "mask_rate",
        "val_interval",
        "seed",
    ];
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("{}:{}: expected key = value", path.display(), lineno + 1))
        })?;
        let key = key.trim().to_string();
        if !KNOWN.contains(&key.as_str()) {
            return Err(Error::Parse(format!(
                "{}:{}: unknown config key {key:?}",
                path.display(),
                lineno + 1
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn file_value<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Parse(format!("config key {key}: invalid value {v:?}"))),
    }
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    peak_lr: f64,
    #[arg(long, default_value_t = 0.15)]
    mask_rate: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_ablate(a: AblateArgs) -> Result<u8> {
    let seed = resolve_seed(a.seed)?;
    let (_, seqs) = load_corpus(&a.corpus, a.vocab, a.seq_len)?;
    let assignments = enumerate_assignments(a.heads, a.blocks);
    println!(
        "sweeping {} head assignments over {} blocks",
        assignments.len(),
        a.blocks
    );
    let mut results: Vec<(String, f64)> = Vec::new();
    for assignment in assignments {
        let label = assignment.to_string();
        let config = ModelConfig::new(
            a.layers,
            a.hidden,
            a.heads,
            a.seq_len,
            a.blocks,
            a.vocab,
            assignment,
            0.0,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(&config, &mut rng)?;
        let tconfig = TrainConfig {
            batch_size: a.batch_size,
            max_steps: a.steps,
            warmup_steps: (a.steps / 10).max(1),
            peak_lr: a.peak_lr,
            mask_rate: a.mask_rate,
            seed,
            val_interval: a.steps,
        };
        let mut opt = AdamState::new(&params, tconfig.warmup_steps, tconfig.peak_lr, a.steps)?;
        train_loop(&seqs, &config, &mut params, &mut opt, &tconfig, 0, None)?;
        let rows = validation_rows(&seqs, a.mask_rate, a.vocab, seed ^ 0xA11A, 16);
        let ppl = validation_perplexity(&params, &config, &rows)?;
        let val_loss = ppl.ln();
        println!("assignment {label:>12}: val_loss {val_loss:.4}");
        results.push((label, val_loss));
    }
    let best = results
        .iter()
        .map(|(_, l)| *l)
        .fold(f64::INFINITY, f64::min);
    let mut csv = String::from("assignment,val_loss,best\n");
    for (label, loss) in &results {
        let is_best = *loss == best;
        csv.push_str(&format!("{label},{loss:.17e},{}\n", is_best as u8));
        if is_best {
            println!("best: {label} (val_loss {loss:.4})");
        }
    }
    if let Some(path) = &a.csv {
        std::fs::write(path, csv).map_err(|e| Error::io(path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// train / eval

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Optional key = value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    /// Head assignment such as "3:1" (counts per shift-permutation power).
    #[arg(long)]
    assignment: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    tie_embeddings: Option<bool>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    val_interval: Option<usize>,
}

struct ResolvedTrain {
    model: ModelConfig,
    train: TrainConfig,
}

fn resolve_train_config(a: &TrainArgs) -> Result<ResolvedTrain> {
    let file = match &a.config {
        Some(p) => parse_config_file(p)?,
        None => HashMap::new(),
    };
    // Flags override the file; the file overrides the toy-scale defaults.
    macro_rules! pick {
        ($flag:expr, $key:literal, $default:expr) => {
            match $flag {
                Some(v) => v,
                None => file_value(&file, $key)?.unwrap_or($default),
            }
        };
    }
    let layers = pick!(a.layers, "layers", 2);
    let hidden = pick!(a.hidden, "hidden", 64);
    let heads = pick!(a.heads, "heads", 4);
    let seq_len = pick!(a.seq_len, "seq_len", 128);
    let blocks = pick!(a.blocks, "blocks", 2);
    let vocab = pick!(a.vocab, "vocab", 1024);
    let dropout = pick!(a.dropout, "dropout", 0.1);
    let tie = pick!(a.tie_embeddings, "tie_embeddings", false);
    let steps = pick!(a.steps, "steps", 200);
    let assignment_str: String = match &a.assignment {
        Some(s) => s.clone(),
        None => file
            .get("assignment")
            .cloned()
            .unwrap_or_else(|| {
                balanced_assignment(blocks, heads)
                    .map(|asn| asn.to_string())
                    .unwrap_or_default()
            }),
    };
    let assignment = HeadAssignment::parse(&assignment_str, blocks)?;
    let mut model = ModelConfig::new(layers, hidden, heads, seq_len, blocks, vocab, assignment, dropout)?;
    model.tie_embeddings = tie;

    let seed = match a.seed {
        Some(s) => s,
        None => match file_value::<u64>(&file, "seed")? {
            Some(s) => s,
            None => resolve_seed(None)?,
        },
    };
    let train = TrainConfig {
        batch_size: pick!(a.batch_size, "batch_size", 8192 / seq_len.max(1)),
        max_steps: steps,
        warmup_steps: pick!(a.warmup, "warmup", (steps / 10).max(1)),
        peak_lr: pick!(a.peak_lr, "peak_lr", 1e-3),
        mask_rate: pick!(a.mask_rate, "mask_rate", 0.15),
        seed,
        val_interval: pick!(a.val_interval, "val_interval", 50),
    };
    Ok(ResolvedTrain { model, train })
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let resolved = resolve_train_config(&a)?;
    let (config, tconfig) = (resolved.model, resolved.train);
    let (_, seqs) = load_corpus(&a.corpus, config.vocab_size, config.seq_len)?;

    let (mut params, start_step) = match &a.resume {
        Some(path) => {
            let (ck_config, params, step) = load_checkpoint(path)?;
            if ck_config.hidden != config.hidden || ck_config.seq_len != config.seq_len {
                return Err(Error::Checkpoint(
                    "checkpoint model shape does not match the requested config".into(),
                ));
            }
            (params, step as usize)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(tconfig.seed);
            (ModelParams::init(&config, &mut rng)?, 0)
        }
    };
    let mut opt = AdamState::new(&params, tconfig.warmup_steps, tconfig.peak_lr, tconfig.max_steps)?;
    if start_step > 0 {
        // Moments are not checkpointed; restart them but keep the step count
        // so the LR schedule continues where it left off.
        opt.t = start_step;
    }
    let log = train_loop(
        &seqs,
        &config,
        &mut params,
        &mut opt,
        &tconfig,
        start_step,
        a.checkpoint_dir.as_deref(),
    )?;
    for row in &log {
        if row.step % tconfig.val_interval.max(1) == 0
            || row.step == tconfig.max_steps
            || row.step == start_step + 1
        {
            println!(
                "step {:>6}  loss {:.4}  lr {:.3e}  tok/s {:.0}  peak_act_bytes {}",
                row.step, row.loss, row.lr, row.tokens_per_sec, row.peak_act_bytes
            );
        }
    }
    if let Some(path) = &a.log {
        write_log_csv(path, &log)?;
        println!("wrote {}", path.display());
    }
    if let Some(last) = log.last() {
        println!("final loss: {:.6}", last.loss);
    }
    Ok(0)
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    mask_rate: f64,
    #[arg(long, default_value_t = 64)]
    max_rows: usize,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let (config, params, step) = load_checkpoint(&a.checkpoint)?;
    let seed = resolve_seed(a.seed)?;
    let (_, seqs) = load_corpus(&a.corpus, config.vocab_size, config.seq_len)?;
    let rows = validation_rows(&seqs, a.mask_rate, config.vocab_size, seed ^ 0xE7A1, a.max_rows);
    if rows.is_empty() {
        return Err(Error::Argument("no usable validation rows in corpus".into()));
    }
    let ppl = validation_perplexity(&params, &config, &rows)?;
    println!(
        "checkpoint step {step}: validation perplexity {ppl:.4} over {} rows (uniform baseline {})",
        rows.len(),
        config.vocab_size
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// gen-corpus

#[derive(Args)]
pub struct GenCorpusArgs {
    /// copy: second half of each document repeats the first half.
    /// markov: first-order Markov text.
    #[arg(long, value_parser = ["copy", "markov"])]
    kind: String,
    #[arg(long, default_value_t = 64)]
    docs: usize,
    /// Document length in tokens (copy corpora; must be even).
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    /// Document length in tokens (markov corpora).
    #[arg(long, default_value_t = 200)]
    doc_len: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_gen_corpus(a: GenCorpusArgs) -> Result<u8> {
    let seed = resolve_seed(a.seed)?;
    let text = match a.kind.as_str() {
        "copy" => {
            if a.seq_len % 2 != 0 {
                return Err(Error::Argument("copy corpora need an even --seq-len".into()));
            }
            copy_task_corpus(a.docs, a.seq_len, a.vocab, seed)
        }
        _ => markov_corpus(a.docs, a.doc_len, a.vocab.saturating_sub(RESERVED_TOKENS), seed),
    };
    std::fs::write(&a.out, text).map_err(|e| Error::io(&a.out, e))?;
    println!("wrote {}", a.out.display());
    Ok(0)
}
