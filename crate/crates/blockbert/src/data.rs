//! Corpus ingestion, vocabulary, sequence packing, MLM corruption, padding to
//! block multiples, sliding-window splitting, and seeded synthetic corpora.
//!
//! Corpus files are UTF-8 plain text with blank-line-separated documents and
//! whitespace tokenization. Vocabulary files hold one token per line; the line
//! number plus the reserved-id count is the token id.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const UNK_ID: usize = 4;
pub const RESERVED_TOKENS: usize = 5;

const RESERVED_NAMES: [&str; RESERVED_TOKENS] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];

/// Whitespace-token vocabulary with fixed reserved ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Frequency-ranked vocabulary, ties broken lexicographically. Tokens
    /// beyond `max_size` (which includes the reserved ids) map to `[UNK]`.
    pub fn build(corpus_text: &str, max_size: usize) -> Result<Vocab> {
        if corpus_text.split_whitespace().next().is_none() {
            return Err(Error::Argument("cannot build a vocabulary from an empty corpus".into()));
        }
        if max_size <= RESERVED_TOKENS {
            return Err(Error::Argument(format!(
                "vocab max_size must exceed the {RESERVED_TOKENS} reserved ids"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in corpus_text.split_whitespace() {
            *counts.entry(tok).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED_TOKENS);

        let mut id_to_token: Vec<String> =
            RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        for (tok, _) in &ranked {
            id_to_token.push(tok.to_string());
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// One non-reserved token per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body: String = self.id_to_token[RESERVED_TOKENS..]
            .iter()
            .map(|t| format!("{t}\n"))
            .collect();
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut id_to_token: Vec<String> =
            RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        for line in text.lines() {
            let tok = line.trim();
            if !tok.is_empty() {
                id_to_token.push(tok.to_string());
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }
}

/// Split a corpus text into documents on blank lines and tokenize each.
pub fn split_documents(text: &str) -> Vec<Vec<&str>> {
    text.split("\n\n")
        .map(|doc| doc.split_whitespace().collect::<Vec<_>>())
        .filter(|toks| !toks.is_empty())
        .collect()
}

/// A fixed-length model input: token ids padded to the sequence length, with
/// pad positions flagged so attention and loss can skip them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub ids: Vec<usize>,
    pub attention_allowed: Vec<bool>,
}

impl PackedSequence {
    fn from_tokens(tokens: &[usize], seq_len: usize) -> PackedSequence {
        let mut ids = tokens.to_vec();
        let mut attention_allowed = vec![true; ids.len()];
        ids.resize(seq_len, PAD_ID);
        attention_allowed.resize(seq_len, false);
        PackedSequence {
            ids,
            attention_allowed,
        }
    }

    pub fn real_len(&self) -> usize {
        self.attention_allowed.iter().filter(|&&a| a).count()
    }
}

/// Fill sequences up to `seq_len` tokens without ever crossing a document
/// boundary; documents longer than `seq_len` are split into chunks.
pub fn pack_sequences(docs: &[Vec<usize>], seq_len: usize) -> Result<Vec<PackedSequence>> {
    if seq_len < 2 {
        return Err(Error::Argument("pack_sequences: seq_len must be >= 2".into()));
    }
    let mut out = Vec::new();
    for doc in docs {
        for chunk in doc.chunks(seq_len) {
            out.push(PackedSequence::from_tokens(chunk, seq_len));
        }
    }
    Ok(out)
}

/// Right-pad a sequence so its length is a multiple of `num_blocks`; the new
/// positions carry the pad id and are excluded from attention.
pub fn pad_to_block_multiple(seq: &PackedSequence, num_blocks: usize) -> Result<PackedSequence> {
    if num_blocks == 0 {
        return Err(Error::Argument("pad_to_block_multiple: n must be >= 1".into()));
    }
    let len = seq.ids.len();
    let target = len.div_ceil(num_blocks) * num_blocks;
    let mut out = seq.clone();
    out.ids.resize(target, PAD_ID);
    out.attention_allowed.resize(target, false);
    Ok(out)
}

/// One corrupted training row: model input, original targets, and the
/// positions that contribute to the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmRow {
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub seed: u64,
}

/// Standard MLM corruption: each non-pad, non-special position is selected
/// with probability `rate`; selected positions become the mask token 80% of
/// the time, a random vocabulary token 10%, and stay unchanged 10%. Targets
/// hold the original token at selected positions. When the Bernoulli draw
/// selects nothing, one maskable position is forced so the row still carries
/// signal. Returns an error when the sequence has no maskable position at all.
pub fn apply_mlm_masking(
    seq: &PackedSequence,
    rate: f64,
    vocab_size: usize,
    seed: u64,
) -> Result<MlmRow> {
    if !(0.0..1.0).contains(&rate) || rate == 0.0 {
        return Err(Error::Argument(format!("mask rate must be in (0, 1), got {rate}")));
    }
    let maskable: Vec<usize> = seq
        .ids
        .iter()
        .enumerate()
        .filter(|&(i, &id)| seq.attention_allowed[i] && id >= RESERVED_TOKENS)
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Err(Error::Argument(
            "sequence has no maskable positions; skipping".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input_ids = seq.ids.clone();
    let target_ids = seq.ids.clone();
    let mut loss_mask = vec![false; seq.ids.len()];
    let mut selected = Vec::new();
    for &i in &maskable {
        if rng.gen::<f64>() < rate {
            selected.push(i);
        }
    }
    if selected.is_empty() {
        selected.push(maskable[rng.gen_range(0..maskable.len())]);
    }
    for &i in &selected {
        loss_mask[i] = true;
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            input_ids[i] = MASK_ID;
        } else if roll < 0.9 {
            input_ids[i] = rng.gen_range(RESERVED_TOKENS..vocab_size);
        } // else: keep the original token
    }
    Ok(MlmRow {
        input_ids,
        target_ids,
        loss_mask,
        seed,
    })
}

/// Cover a long token sequence with windows of size `window` starting every
/// `stride` tokens; the final window is clamped so it ends at the sequence end.
/// Returns `(start, end)` pairs.
pub fn sliding_window_split(
    len: usize,
    window: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>> {
    if stride == 0 {
        return Err(Error::Argument("sliding_window_split: stride must be > 0".into()));
    }
    if stride > window {
        return Err(Error::Argument(format!(
            "sliding_window_split: stride {stride} exceeds window {window}"
        )));
    }
    if len <= window {
        return Ok(vec![(0, len)]);
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        if start + window >= len {
            out.push((len - window, len));
            break;
        }
        out.push((start, start + window));
        start += stride;
    }
    Ok(out)
}

/// Copy-task corpus: each document is `seq_len` tokens whose second half
/// repeats the first half, so masked positions are predictable from the
/// mirror position in the other half. Written as text so it flows through the
/// same vocabulary/packing path as any other corpus.
pub fn copy_task_corpus(
    num_docs: usize,
    seq_len: usize,
    vocab_size: usize,
    seed: u64,
) -> String {
    assert!(seq_len % 2 == 0, "copy task needs an even sequence length");
    assert!(vocab_size > RESERVED_TOKENS + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(num_docs);
    let content = vocab_size - RESERVED_TOKENS;
    for _ in 0..num_docs {
        let half: Vec<String> = (0..seq_len / 2)
            .map(|_| format!("w{:03}", rng.gen_range(0..content)))
            .collect();
        let mut words = half.clone();
        words.extend(half);
        docs.push(words.join(" "));
    }
    docs.join("\n\n")
}

/// Seeded first-order Markov text over a small synthetic word list.
pub fn markov_corpus(num_docs: usize, doc_len: usize, num_words: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..num_words).map(|i| format!("m{i:03}")).collect();
    // Sparse transition table: each word prefers a handful of successors.
    let succ: Vec<Vec<usize>> = (0..num_words)
        .map(|_| (0..4).map(|_| rng.gen_range(0..num_words)).collect())
        .collect();
    let mut docs = Vec::with_capacity(num_docs);
    for _ in 0..num_docs {
        let mut state = rng.gen_range(0..num_words);
        let mut toks = Vec::with_capacity(doc_len);
        for _ in 0..doc_len {
            toks.push(words[state].clone());
            state = if rng.gen::<f64>() < 0.9 {
                succ[state][rng.gen_range(0..4)]
            } else {
                rng.gen_range(0..num_words)
            };
        }
        docs.push(toks.join(" "));
    }
    docs.join("\n\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_frequency_then_lexicographic() {
        let v = Vocab::build("a b a", 100).unwrap();
        assert_eq!(v.id("a"), RESERVED_TOKENS);
        assert_eq!(v.id("b"), RESERVED_TOKENS + 1);
        let v2 = Vocab::build("a b a", 100).unwrap();
        assert_eq!(v.id_to_token, v2.id_to_token);
    }

    #[test]
    fn vocab_overflow_maps_to_unk() {
        let v = Vocab::build("a a b c", RESERVED_TOKENS + 2).unwrap();
        assert_eq!(v.len(), RESERVED_TOKENS + 2);
        assert_eq!(v.id("c"), UNK_ID);
        assert_eq!(v.id("never-seen"), UNK_ID);
    }

    #[test]
    fn vocab_empty_corpus_errors() {
        assert!(Vocab::build("  \n ", 100).is_err());
    }

    #[test]
    fn pack_pads_short_doc() {
        let seqs = pack_sequences(&[vec![7, 8, 9]], 8).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].ids, vec![7, 8, 9, 0, 0, 0, 0, 0]);
        assert_eq!(seqs[0].real_len(), 3);
    }

    #[test]
    fn pack_never_crosses_documents() {
        let seqs = pack_sequences(&[vec![5; 5], vec![6; 5]], 8).unwrap();
        assert_eq!(seqs.len(), 2);
        assert!(seqs[0].ids[..5].iter().all(|&t| t == 5));
        assert!(seqs[1].ids[..5].iter().all(|&t| t == 6));
    }

    #[test]
    fn pack_splits_long_doc() {
        let seqs = pack_sequences(&[vec![5; 20]], 8).unwrap();
        assert_eq!(seqs.len(), 3); // ceil(20/8)
        assert_eq!(seqs[2].real_len(), 4);
    }

    #[test]
    fn block_padding_examples() {
        let seq = PackedSequence::from_tokens(&[5; 7], 7);
        assert_eq!(pad_to_block_multiple(&seq, 2).unwrap().ids.len(), 8);
        let seq = PackedSequence::from_tokens(&[5; 8], 8);
        assert_eq!(pad_to_block_multiple(&seq, 2).unwrap(), seq);
        let seq = PackedSequence::from_tokens(&[5; 5], 5);
        let padded = pad_to_block_multiple(&seq, 3).unwrap();
        assert_eq!(padded.ids.len(), 6);
        assert!(!padded.attention_allowed[5]);
    }

    #[test]
    fn masking_deterministic_and_respects_special_positions() {
        let seq = PackedSequence::from_tokens(&[5, 6, 7, 8, CLS_ID, 9], 8);
        let a = apply_mlm_masking(&seq, 0.5, 32, 42).unwrap();
        let b = apply_mlm_masking(&seq, 0.5, 32, 42).unwrap();
        assert_eq!(a, b);
        // Special and pad positions never selected or altered.
        assert!(!a.loss_mask[4]);
        assert!(!a.loss_mask[6] && !a.loss_mask[7]);
        assert_eq!(a.input_ids[4], CLS_ID);
        assert_eq!(a.input_ids[6], PAD_ID);
        // Targets hold originals at selected positions.
        for i in 0..8 {
            if a.loss_mask[i] {
                assert_eq!(a.target_ids[i], seq.ids[i]);
            }
        }
    }

    #[test]
    fn masking_zero_maskable_errors() {
        let seq = PackedSequence::from_tokens(&[CLS_ID, SEP_ID], 2);
        assert!(apply_mlm_masking(&seq, 0.15, 32, 1).is_err());
    }

    #[test]
    fn masking_rate_within_binomial_bounds() {
        // 10k maskable positions at rate 0.15: expect within 3 sigma.
        let n = 10_000;
        let seq = PackedSequence::from_tokens(&vec![5; n], n);
        let row = apply_mlm_masking(&seq, 0.15, 64, 7).unwrap();
        let selected = row.loss_mask.iter().filter(|&&m| m).count() as f64;
        let mean = 0.15 * n as f64;
        let sigma = (n as f64 * 0.15 * 0.85).sqrt();
        assert!((selected - mean).abs() < 3.0 * sigma, "selected {selected}");
    }

    #[test]
    fn masking_split_roughly_80_10_10() {
        let n = 20_000;
        let seq = PackedSequence::from_tokens(&vec![5; n], n);
        let row = apply_mlm_masking(&seq, 0.5, 64, 3).unwrap();
        let mut masked = 0;
        let mut kept = 0;
        let mut random = 0;
        for i in 0..n {
            if row.loss_mask[i] {
                match row.input_ids[i] {
                    MASK_ID => masked += 1,
                    id if id == seq.ids[i] => kept += 1,
                    _ => random += 1,
                }
            }
        }
        let total = (masked + kept + random) as f64;
        assert!((masked as f64 / total - 0.8).abs() < 0.03);
        assert!((kept as f64 / total - 0.1).abs() < 0.02);
        assert!((random as f64 / total - 0.1).abs() < 0.02);
    }

    #[test]
    fn sliding_window_coverage_example() {
        let w = sliding_window_split(1000, 512, 128).unwrap();
        let starts: Vec<usize> = w.iter().map(|&(s, _)| s).collect();
        assert_eq!(starts, vec![0, 128, 256, 384, 488]);
        assert_eq!(w.last().unwrap().1, 1000);
    }

    #[test]
    fn sliding_window_short_input_single_window() {
        assert_eq!(sliding_window_split(100, 512, 128).unwrap(), vec![(0, 100)]);
    }

    #[test]
    fn sliding_window_overlap_and_cover() {
        let w = sliding_window_split(700, 256, 128).unwrap();
        // Every adjacent pair overlaps by window - stride, except the last
        // window which is clamped to end at the sequence end.
        for pair in w[..w.len() - 1].windows(2) {
            assert_eq!(pair[0].1 - pair[1].0, 256 - 128);
        }
        assert!(w[w.len() - 2].1 > w[w.len() - 1].0);
        let mut covered = vec![false; 700];
        for &(s, e) in &w {
            assert!(e - s <= 256);
            covered[s..e].iter_mut().for_each(|c| *c = true);
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn sliding_window_rejects_zero_stride() {
        assert!(sliding_window_split(100, 64, 0).is_err());
    }

    #[test]
    fn copy_corpus_mirrors_halves() {
        let text = copy_task_corpus(3, 16, 64, 9);
        for doc in text.split("\n\n") {
            let toks: Vec<&str> = doc.split_whitespace().collect();
            assert_eq!(toks.len(), 16);
            assert_eq!(&toks[..8], &toks[8..]);
        }
    }

    #[test]
    fn corpora_deterministic() {
        assert_eq!(copy_task_corpus(2, 8, 32, 1), copy_task_corpus(2, 8, 32, 1));
        assert_eq!(markov_corpus(2, 50, 30, 1), markov_corpus(2, 50, 30, 1));
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build("x y z x y x", 100).unwrap();
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(v.id("x"), back.id("x"));
        assert_eq!(v.len(), back.len());
    }
}
