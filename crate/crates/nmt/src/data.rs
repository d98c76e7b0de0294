//! Vocabulary construction, corpus handling, batching with padding and
//! masks, and early-stopping bookkeeping.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
/// Text forms of the reserved entries, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

const VOCAB_MAGIC: &str = "#vocab-v1";

/// Token/id bijection with the four reserved ids fixed at the bottom.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            assert!(index.insert(t.clone(), i).is_none(), "duplicate token {t}");
        }
        Vocab { tokens, index }
    }

    /// Keeps the most frequent tokens of the corpus up to `limit` total
    /// entries (reserved ids included). Frequency ties break by first
    /// occurrence in the corpus.
    pub fn build<'a>(lines: impl Iterator<Item = &'a str>, limit: usize) -> Result<Vocab> {
        if limit <= 4 {
            return Err(Error::Data(format!(
                "vocabulary limit {limit} leaves no room for regular tokens"
            )));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new(); // count, first pos
        let mut pos = 0usize;
        let mut any = false;
        for line in lines {
            any = true;
            for tok in line.split_whitespace() {
                let e = counts.entry(tok).or_insert((0, pos));
                e.0 += 1;
                pos += 1;
            }
        }
        if !any {
            return Err(Error::Data("empty corpus".into()));
        }
        let mut entries: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for (tok, _) in entries.into_iter().take(limit - 4) {
            tokens.push(tok.to_string());
        }
        Ok(Vocab::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a token; unknown tokens map to the unk id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// FNV-1a over the token list; identifies the vocabulary in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tokens {
            for b in t.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{VOCAB_MAGIC}")?;
        for t in &self.tokens[4..] {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        match lines.next() {
            Some(Ok(l)) if l.trim() == VOCAB_MAGIC => {}
            _ => {
                return Err(Error::Format(format!(
                    "{} is not a vocabulary file (missing {VOCAB_MAGIC})",
                    path.display()
                )))
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for line in lines {
            let line = line?;
            if !line.is_empty() {
                tokens.push(line);
            }
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// Wraps a sentence in the start and end markers.
pub fn mark(ids: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(BOS_ID);
    out.extend_from_slice(ids);
    out.push(EOS_ID);
    out
}

/// One training example: marked source and target id sequences, plus an
/// optional guided-alignment matrix.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub alignment: Option<Tensor>,
}

/// Padded id matrices with masks. Masks are true exactly at real tokens.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
    /// Indices of the pairs this batch was built from.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.src.len()
    }

    /// Unpadded source row, recovered through the mask.
    pub fn src_row(&self, b: usize) -> Vec<usize> {
        self.src[b]
            .iter()
            .zip(&self.src_mask[b])
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn tgt_row(&self, b: usize) -> Vec<usize> {
        self.tgt[b]
            .iter()
            .zip(&self.tgt_mask[b])
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// Epoch schedule and batching geometry.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub epochs: usize,
    pub maxi_batch: usize,
    pub mini_batch: usize,
    pub shuffle_seed: u64,
    /// Validate every this many updates (0: once per epoch).
    pub validation_every: usize,
    /// Sentences longer than this many tokens are dropped at training time.
    pub max_len: usize,
}

impl Default for TrainPlan {
    fn default() -> TrainPlan {
        TrainPlan {
            epochs: 10,
            maxi_batch: 1600,
            mini_batch: 16,
            shuffle_seed: 1,
            validation_every: 0,
            max_len: 100,
        }
    }
}

/// Drops pairs whose marked source or target exceeds the cap. Returns the
/// kept pairs and the dropped count.
pub fn filter_long(pairs: Vec<TrainPair>, max_len: usize) -> (Vec<TrainPair>, usize) {
    let before = pairs.len();
    let kept: Vec<TrainPair> = pairs
        .into_iter()
        .filter(|p| p.src.len() <= max_len && p.tgt.len() <= max_len)
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Shuffles, forms maxi-batches, sorts each by (target length, source
/// length), slices mini-batches, and pads to the per-mini-batch maxima.
pub fn make_batches(pairs: &[TrainPair], plan: &TrainPlan, rng: &mut impl Rng) -> Vec<Batch> {
    assert!(plan.mini_batch >= 1 && plan.maxi_batch >= plan.mini_batch);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);

    let mut batches = Vec::new();
    for maxi in order.chunks(plan.maxi_batch) {
        let mut maxi: Vec<usize> = maxi.to_vec();
        maxi.sort_by_key(|&i| (pairs[i].tgt.len(), pairs[i].src.len()));
        for mini in maxi.chunks(plan.mini_batch) {
            let j_max = mini.iter().map(|&i| pairs[i].src.len()).max().unwrap();
            let i_max = mini.iter().map(|&i| pairs[i].tgt.len()).max().unwrap();
            let mut batch = Batch {
                src: Vec::with_capacity(mini.len()),
                tgt: Vec::with_capacity(mini.len()),
                src_mask: Vec::with_capacity(mini.len()),
                tgt_mask: Vec::with_capacity(mini.len()),
                indices: mini.to_vec(),
            };
            for &i in mini {
                let pad_row = |ids: &[usize], width: usize| {
                    let mut row = ids.to_vec();
                    let mut mask = vec![true; ids.len()];
                    row.resize(width, PAD_ID);
                    mask.resize(width, false);
                    (row, mask)
                };
                let (row, mask) = pad_row(&pairs[i].src, j_max);
                batch.src.push(row);
                batch.src_mask.push(mask);
                let (row, mask) = pad_row(&pairs[i].tgt, i_max);
                batch.tgt.push(row);
                batch.tgt_mask.push(mask);
            }
            batches.push(batch);
        }
    }
    batches
}

/// Early stopping: stop when the best validation loss has not improved for
/// `patience` consecutive evaluations.
pub fn should_stop(history: &[f64], patience: usize) -> bool {
    assert!(!history.is_empty(), "empty validation history");
    let mut best = history[0];
    let mut best_idx = 0;
    for (i, &v) in history.iter().enumerate() {
        if v < best {
            best = v;
            best_idx = i;
        }
    }
    history.len() - 1 - best_idx >= patience
}

/// Mixes true and synthetic parallel data 1:1 by over-sampling the smaller
/// side (cycling through it).
pub fn mix_one_to_one(true_pairs: &[TrainPair], synth_pairs: &[TrainPair]) -> Vec<TrainPair> {
    if true_pairs.is_empty() || synth_pairs.is_empty() {
        let mut all = true_pairs.to_vec();
        all.extend_from_slice(synth_pairs);
        return all;
    }
    let n = true_pairs.len().max(synth_pairs.len());
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        out.push(true_pairs[i % true_pairs.len()].clone());
        out.push(synth_pairs[i % synth_pairs.len()].clone());
    }
    out
}

/// Reads a corpus file: UTF-8, one sentence per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut lines = Vec::new();
    for line in f.lines() {
        lines.push(line?);
    }
    Ok(lines)
}
