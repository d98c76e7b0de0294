//! Byte-pair-encoding subword learner and segmenter with `@@` continuation
//! markers.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MERGES_MAGIC: &str = "#bpe-v1";
/// Marker carried by every subword except the last one of a word.
pub const CONTINUATION: &str = "@@";

/// Ordered list of learned merges plus a fingerprint of the corpus the
/// table was learned on.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    pub fingerprint: u64,
}

impl MergeTable {
    pub fn empty() -> MergeTable {
        MergeTable {
            merges: Vec::new(),
            fingerprint: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{MERGES_MAGIC} {}", self.merges.len())?;
        for (l, r) in &self.merges {
            writeln!(f, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MergeTable> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty merges file".into()))??;
        let mut head = header.split_whitespace();
        if head.next() != Some(MERGES_MAGIC) {
            return Err(Error::Format(format!(
                "{} is not a merges file (missing {MERGES_MAGIC})",
                path.display()
            )));
        }
        let declared: usize = head
            .next()
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Format("merges header lacks the merge count".into()))?;
        let mut merges = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(' ');
            match (it.next(), it.next(), it.next()) {
                (Some(l), Some(r), None) => merges.push((l.to_string(), r.to_string())),
                _ => {
                    return Err(Error::Format(format!(
                        "merge line needs exactly `left right`: {line}"
                    )))
                }
            }
        }
        if merges.len() != declared {
            return Err(Error::Format(format!(
                "merges header declares {declared} merges, file has {}",
                merges.len()
            )));
        }
        Ok(MergeTable {
            merges,
            fingerprint: 0,
        })
    }
}

/// Counts words in whitespace-tokenized lines.
pub fn word_frequencies<'a>(lines: impl Iterator<Item = &'a str>) -> HashMap<String, u64> {
    let mut freq = HashMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *freq.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    freq
}

fn corpus_fingerprint(freq: &HashMap<String, u64>) -> u64 {
    let mut entries: Vec<(&String, &u64)> = freq.iter().collect();
    entries.sort();
    let mut h: u64 = 0xcbf29ce484222325;
    for (w, c) in entries {
        for b in w.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h ^= c;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Weighted count of each adjacent symbol pair over segmented words.
pub fn pair_counts(words: &[(Vec<String>, u64)]) -> HashMap<(String, String), u64> {
    let mut counts = HashMap::new();
    for (symbols, n) in words {
        for pair in symbols.windows(2) {
            *counts
                .entry((pair[0].clone(), pair[1].clone()))
                .or_insert(0) += n;
        }
    }
    counts
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let joined = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = joined;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

/// Learns up to `num_merges` merges from a word-frequency table. Each
/// iteration merges the most frequent adjacent symbol pair across the
/// weighted corpus; ties break toward the lexicographically smallest
/// (left, right). Stops early when no pair is left.
pub fn bpe_learn(freq: &HashMap<String, u64>, num_merges: usize) -> MergeTable {
    bpe_learn_with_counts(freq, num_merges).0
}

/// Like [`bpe_learn`] but also reports each selected pair's count at its
/// selection moment, for replay checks.
pub fn bpe_learn_with_counts(
    freq: &HashMap<String, u64>,
    num_merges: usize,
) -> (MergeTable, Vec<u64>) {
    let mut words: Vec<(Vec<String>, u64)> = freq
        .iter()
        .map(|(w, &n)| (w.chars().map(|c| c.to_string()).collect(), n))
        .collect();
    // deterministic order is not required for counting, but keep the corpus
    // sorted so debugging output is stable
    words.sort();

    let mut merges = Vec::new();
    let mut counts_at_selection = Vec::new();
    for _ in 0..num_merges {
        let counts = pair_counts(&words);
        let best = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(pair, &n)| (pair.clone(), n));
        let Some(((left, right), n)) = best else {
            break; // fewer distinct pairs than requested merges
        };
        for (symbols, _) in &mut words {
            merge_in_place(symbols, &left, &right);
        }
        merges.push((left, right));
        counts_at_selection.push(n);
    }
    (
        MergeTable {
            merges,
            fingerprint: corpus_fingerprint(freq),
        },
        counts_at_selection,
    )
}

/// Segments one word: split to characters, apply the merges in table order
/// wherever applicable, then mark every subword but the last with `@@`.
pub fn bpe_apply(table: &MergeTable, word: &str) -> Vec<String> {
    if word.is_empty() {
        return Vec::new();
    }
    let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    for (l, r) in &table.merges {
        if symbols.len() < 2 {
            break;
        }
        merge_in_place(&mut symbols, l, r);
    }
    let last = symbols.len() - 1;
    symbols
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if i < last {
                format!("{s}{CONTINUATION}")
            } else {
                s
            }
        })
        .collect()
}

/// Segments a whitespace-tokenized line, caching per-word results.
pub struct Segmenter<'t> {
    table: &'t MergeTable,
    cache: HashMap<String, Vec<String>>,
}

impl<'t> Segmenter<'t> {
    pub fn new(table: &'t MergeTable) -> Segmenter<'t> {
        Segmenter {
            table,
            cache: HashMap::new(),
        }
    }

    pub fn segment_word(&mut self, word: &str) -> &[String] {
        if !self.cache.contains_key(word) {
            let parts = bpe_apply(self.table, word);
            self.cache.insert(word.to_string(), parts);
        }
        &self.cache[word]
    }

    pub fn segment_line(&mut self, line: &str) -> String {
        let mut out: Vec<String> = Vec::new();
        for w in line.split_whitespace() {
            out.extend(self.segment_word(w).iter().cloned());
        }
        out.join(" ")
    }
}

/// Joins a subword token stream back into words: every `@@`-suffixed token
/// glues to its successor. A trailing marker on the final token is reported
/// through the flag but joined anyway.
pub fn bpe_decode<S: AsRef<str>>(tokens: &[S]) -> (String, bool) {
    let mut out = String::new();
    let mut glue = false;
    let mut dangling = false;
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        if !glue && !out.is_empty() {
            out.push(' ');
        }
        match tok.strip_suffix(CONTINUATION) {
            Some(stem) => {
                out.push_str(stem);
                glue = true;
                if i == tokens.len() - 1 {
                    dangling = true;
                }
            }
            None => {
                out.push_str(tok);
                glue = false;
            }
        }
    }
    (out, dangling)
}

/// Convenience: decode a whitespace-separated token line.
pub fn bpe_decode_line(line: &str) -> (String, bool) {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    bpe_decode(&tokens)
}
