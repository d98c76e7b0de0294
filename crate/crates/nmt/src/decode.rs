//! Inference: greedy and beam search, forced decoding, ensemble averaging,
//! and n-best reranking.

use crate::data::{mark, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::graph::{Bindings, Tape, LOG_CLAMP};
use crate::seq2seq::{CoverageState, DecoderStateValue, EncodedSource, Seq2SeqModel};

/// Search-time knobs.
#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub beam: usize,
    /// Divide the final score by output length (end marker included).
    pub normalize: bool,
    /// Output length bound: max_len_factor * source length + 5.
    pub max_len_factor: f32,
    /// Weights of the coverage over/under-generation penalties in the final
    /// ranking; 0 disables them.
    pub coverage_over_weight: f32,
    pub coverage_under_weight: f32,
    /// Apply the coverage penalties while pruning too, not only at the end.
    pub coverage_in_search: bool,
}

impl BeamConfig {
    pub fn new(beam: usize) -> BeamConfig {
        BeamConfig {
            beam,
            normalize: false,
            max_len_factor: 2.0,
            coverage_over_weight: 0.0,
            coverage_under_weight: 0.0,
            coverage_in_search: false,
        }
    }

    fn track_coverage(&self) -> bool {
        self.coverage_over_weight != 0.0
            || self.coverage_under_weight != 0.0
            || self.coverage_in_search
    }
}

/// Output-length cap used by the search: factor * source length + 5.
pub fn max_output_len(factor: f32, source_len: usize) -> usize {
    (factor * source_len as f32) as usize + 5
}

/// A finished (or truncated) translation hypothesis.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Output tokens without the start marker; ends with the end-of-sentence
    /// id exactly when the hypothesis completed.
    pub tokens: Vec<usize>,
    /// Accumulated log-probability.
    pub score: f64,
    /// Ranking score: length-normalized when configured, minus weighted
    /// coverage penalties.
    pub final_score: f64,
    /// Set when the search hit the length bound with no completed hypothesis.
    pub truncated: bool,
    /// One attention row per emitted token, when the model produces them.
    pub attention: Vec<Vec<f32>>,
}

/// Ordered, vocabulary-compatible collection of models decoded jointly.
pub struct EnsembleSpec<'a> {
    models: Vec<&'a Seq2SeqModel>,
}

impl<'a> EnsembleSpec<'a> {
    pub fn new(models: Vec<&'a Seq2SeqModel>) -> Result<EnsembleSpec<'a>> {
        if models.is_empty() {
            return Err(Error::Data("ensemble needs at least one model".into()));
        }
        let v = models[0].config.tgt_vocab;
        if models.iter().any(|m| m.config.tgt_vocab != v) {
            return Err(Error::Data(
                "ensemble members disagree on the target vocabulary".into(),
            ));
        }
        Ok(EnsembleSpec { models })
    }

    pub fn members(&self) -> &[&'a Seq2SeqModel] {
        &self.models
    }

    pub fn tgt_vocab(&self) -> usize {
        self.models[0].config.tgt_vocab
    }
}

/// Arithmetic mean of per-model distributions; still a distribution.
pub fn ensemble_predict(distributions: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = distributions
        .first()
        .ok_or_else(|| Error::Data("no distributions to average".into()))?;
    if distributions.iter().any(|d| d.len() != first.len()) {
        return Err(Error::Data(
            "ensemble members disagree on the target vocabulary".into(),
        ));
    }
    let n = distributions.len() as f64;
    let mut out = vec![0.0f32; first.len()];
    for (k, o) in out.iter_mut().enumerate() {
        let sum: f64 = distributions.iter().map(|d| d[k] as f64).sum();
        *o = (sum / n) as f32;
    }
    Ok(out)
}

struct BeamItem {
    /// Index into the back-pointer arena; usize::MAX marks the root.
    arena: usize,
    score: f64,
    last_token: usize,
    states: Vec<DecoderStateValue>,
    coverage: Option<CoverageState>,
    attention: Vec<Vec<f32>>,
}

struct Completed {
    arena: usize,
    score: f64,
    length: usize,
    coverage: Option<CoverageState>,
    attention: Vec<Vec<f32>>,
}

fn walk_arena(arena: &[(usize, usize)], mut idx: usize) -> Vec<usize> {
    let mut tokens = Vec::new();
    while idx != usize::MAX {
        let (parent, token) = arena[idx];
        tokens.push(token);
        idx = parent;
    }
    tokens.reverse();
    tokens
}

/// Beam search over an ensemble. Keeps the `beam` highest-scoring expansions
/// per step; a hypothesis that emits the end marker leaves the live beam and
/// shrinks it by one; search ends when the live beam is empty or the length
/// bound is hit. Scores accumulate in log space; ties break deterministically
/// by lower token id, then lower parent index.
pub fn beam_search(
    ensemble: &EnsembleSpec,
    src: &[usize],
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    if src.is_empty() {
        return Err(Error::Data("empty source sentence".into()));
    }
    if cfg.beam < 1 {
        return Err(Error::Data("beam size must be at least 1".into()));
    }
    let encodings: Vec<EncodedSource> = ensemble
        .models
        .iter()
        .map(|m| m.encode_values(src))
        .collect::<Result<Vec<_>>>()?;
    let max_steps = max_output_len(cfg.max_len_factor, src.len());
    let track_cov = cfg.track_coverage();

    let mut arena: Vec<(usize, usize)> = Vec::new();
    let mut live: Vec<BeamItem> = vec![BeamItem {
        arena: usize::MAX,
        score: 0.0,
        last_token: BOS_ID,
        states: encodings.iter().map(|e| e.init_state.clone()).collect(),
        coverage: track_cov.then(|| {
            CoverageState::new(src.len(), encodings[0].fertility.clone())
        }),
        attention: Vec::new(),
    }];
    let mut completed: Vec<Completed> = Vec::new();
    // the live beam capacity; completing a hypothesis shrinks it by one
    let mut capacity = cfg.beam;

    for _step in 0..max_steps {
        if live.is_empty() || capacity == 0 {
            break;
        }
        // advance each live hypothesis once; expansions share the new state
        let mut stepped = Vec::with_capacity(live.len());
        for item in &live {
            let cov_values = item.coverage.as_ref().map(|c| c.values().to_vec());
            let mut dists = Vec::with_capacity(ensemble.models.len());
            let mut new_states = Vec::with_capacity(ensemble.models.len());
            let mut alphas: Vec<Vec<f32>> = Vec::new();
            for (m, model) in ensemble.models.iter().enumerate() {
                let out = model.step_values(
                    &encodings[m],
                    &item.states[m],
                    item.last_token,
                    cov_values.as_deref(),
                )?;
                dists.push(out.probs);
                new_states.push(out.state);
                if let Some(a) = out.alpha {
                    alphas.push(a);
                }
            }
            let avg = ensemble_predict(&dists)?;
            let alpha = (!alphas.is_empty()).then(|| {
                let mut mean = vec![0.0f32; alphas[0].len()];
                for a in &alphas {
                    for (m, &v) in mean.iter_mut().zip(a) {
                        *m += v / alphas.len() as f32;
                    }
                }
                mean
            });
            stepped.push((avg, new_states, alpha));
        }

        // candidate expansions: (prune key, raw score, item idx, token)
        let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (i, (avg, _, alpha)) in stepped.iter().enumerate() {
            for (tok, &p) in avg.iter().enumerate() {
                let raw = live[i].score + (p.max(LOG_CLAMP) as f64).ln();
                let prune = if cfg.coverage_in_search {
                    let mut cov = live[i].coverage.clone().unwrap();
                    if let Some(a) = alpha {
                        cov.update(a);
                    }
                    let (over, under) = cov.penalties();
                    raw - cfg.coverage_over_weight as f64 * over as f64
                        - cfg.coverage_under_weight as f64 * under as f64
                } else {
                    raw
                };
                candidates.push((prune, raw, i, tok));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.3.cmp(&b.3))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(capacity);

        let mut next: Vec<BeamItem> = Vec::new();
        for (_, raw, i, tok) in candidates {
            arena.push((live[i].arena, tok));
            let idx = arena.len() - 1;
            let (_, new_states, alpha) = &stepped[i];
            let mut coverage = live[i].coverage.clone();
            if let (Some(cov), Some(a)) = (&mut coverage, alpha) {
                cov.update(a);
            }
            let mut attention = live[i].attention.clone();
            if let Some(a) = alpha {
                attention.push(a.clone());
            }
            if tok == EOS_ID {
                completed.push(Completed {
                    arena: idx,
                    score: raw,
                    length: walk_arena(&arena, idx).len(),
                    coverage,
                    attention,
                });
                capacity -= 1;
            } else {
                next.push(BeamItem {
                    arena: idx,
                    score: raw,
                    last_token: tok,
                    states: new_states.clone(),
                    coverage,
                    attention,
                });
            }
        }
        live = next;
    }

    if completed.is_empty() {
        // length bound hit: emit the best partial, flagged
        let best = live
            .into_iter()
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
            .ok_or_else(|| Error::State("beam search lost all hypotheses"))?;
        let tokens = walk_arena(&arena, best.arena);
        let len = tokens.len().max(1);
        let final_score = if cfg.normalize {
            best.score / len as f64
        } else {
            best.score
        };
        return Ok(vec![Hypothesis {
            tokens,
            score: best.score,
            final_score,
            truncated: true,
            attention: best.attention,
        }]);
    }

    // final ranking: normalization and coverage penalties apply only here
    let mut out: Vec<Hypothesis> = completed
        .into_iter()
        .map(|c| {
            let mut final_score = if cfg.normalize {
                c.score / c.length as f64
            } else {
                c.score
            };
            if let Some(cov) = &c.coverage {
                let (over, under) = cov.penalties();
                final_score -= cfg.coverage_over_weight as f64 * over as f64;
                final_score -= cfg.coverage_under_weight as f64 * under as f64;
            }
            Hypothesis {
                tokens: walk_arena(&arena, c.arena),
                score: c.score,
                final_score,
                truncated: false,
                attention: c.attention,
            }
        })
        .collect();
    out.sort_by(|a, b| b.final_score.partial_cmp(&a.final_score).unwrap());
    Ok(out)
}

/// Greedy decoding: beam search with a beam of one.
pub fn greedy(model: &Seq2SeqModel, src: &[usize]) -> Result<Hypothesis> {
    let ensemble = EnsembleSpec::new(vec![model])?;
    let hyps = beam_search(&ensemble, src, &BeamConfig::new(1))?;
    Ok(hyps.into_iter().next().unwrap())
}

/// Forced decoding: runs the model over a *given* output sentence and
/// returns the per-token log-probabilities and their sum. Equals the
/// negated training loss of the pair.
pub fn force_score(
    model: &Seq2SeqModel,
    src: &[usize],
    tgt: &[usize],
) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new(&model.params);
    let tf = model.sequence_loss(&mut tape, src, tgt, crate::seq2seq::no_dropout())?;
    tape.forward(&Bindings::new())?;
    let per_token: Vec<f64> = tf
        .per_token_nll
        .iter()
        .map(|&n| -(tape.value(n).item() as f64))
        .collect();
    let total = per_token.iter().sum();
    Ok((per_token, total))
}

/// Which way a reranking scorer reads the target sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreDirection {
    LeftToRight,
    /// The scorer was trained on reversed targets; candidates are reversed
    /// before forced decoding.
    RightToLeft,
}

/// Reranks candidate token sequences (unmarked) by the weighted mean of
/// per-scorer length-normalized log-probabilities. Equal scores keep their
/// original order.
pub fn rerank(
    source: &[usize],
    candidates: &[Vec<usize>],
    scorers: &[(&Seq2SeqModel, ScoreDirection)],
    weights: Option<&[f64]>,
) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Data("empty n-best list".into()));
    }
    if scorers.is_empty() {
        return Err(Error::Data("no scorers".into()));
    }
    let weights: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != scorers.len() {
                return Err(Error::Data("one weight per scorer required".into()));
            }
            w.to_vec()
        }
        None => vec![1.0; scorers.len()],
    };
    let wsum: f64 = weights.iter().sum();

    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(candidates.len());
    for (idx, cand) in candidates.iter().enumerate() {
        let mut combined = 0.0f64;
        for ((model, direction), w) in scorers.iter().zip(&weights) {
            let tokens: Vec<usize> = match direction {
                ScoreDirection::LeftToRight => cand.clone(),
                ScoreDirection::RightToLeft => cand.iter().rev().cloned().collect(),
            };
            let marked = mark(&tokens);
            let (_, total) = force_score(model, source, &marked)?;
            let len = (marked.len() - 1).max(1) as f64; // predictions incl. eos
            combined += w * (total / len);
        }
        scored.push((idx, combined / wsum));
    }
    // stable sort: ties keep the original candidate order
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(scored)
}

/// One line of the n-best text format:
/// `sentence-id ||| tokens ||| score`.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestEntry {
    pub sentence_id: usize,
    pub tokens: Vec<String>,
    pub score: f64,
}

impl NBestEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{} ||| {} ||| {}",
            self.sentence_id,
            self.tokens.join(" "),
            self.score
        )
    }

    pub fn parse(line: &str) -> Result<NBestEntry> {
        let parts: Vec<&str> = line.split(" ||| ").collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!(
                "n-best line needs 3 ` ||| `-separated fields: {line}"
            )));
        }
        Ok(NBestEntry {
            sentence_id: parts[0]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad sentence id in: {line}")))?,
            tokens: parts[1].split_whitespace().map(|s| s.to_string()).collect(),
            score: parts[2]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad score in: {line}")))?,
        })
    }
}
