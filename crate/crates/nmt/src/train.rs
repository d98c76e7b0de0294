//! The training loop: mini-batch gradient computation (parallel across
//! sentences), guided alignment, validation, and early stopping.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{make_batches, should_stop, Batch, TrainPair, TrainPlan};
use crate::error::{Error, Result};
use crate::graph::{Bindings, GradStore, NodeId, Tape};
use crate::optim::{Hyper, Optimizer, OptimizerKind};
use crate::seq2seq::{guided_alignment_cost, AlignMode, Seq2SeqModel};
use crate::tensor::Tensor;

/// Whether the optimizer sees the per-batch gradient sum or its mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Mean over the mini-batch (the cost-averaging convention).
    #[default]
    Average,
    Sum,
}

impl GradMode {
    pub fn parse(s: &str) -> Option<GradMode> {
        match s {
            "average" => Some(GradMode::Average),
            "sum" => Some(GradMode::Sum),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub plan: TrainPlan,
    pub optimizer: OptimizerKind,
    pub hyper: Hyper,
    pub grad_mode: GradMode,
    /// Guided-alignment penalty weight and mode; weight 0 disables it.
    pub align_weight: f32,
    pub align_mode: AlignMode,
    pub patience: usize,
    /// Dump a checkpoint every this many updates (0: only at the end).
    pub checkpoint_every: usize,
    pub threads: usize,
}

impl Default for TrainSettings {
    fn default() -> TrainSettings {
        TrainSettings {
            plan: TrainPlan::default(),
            optimizer: OptimizerKind::Adam,
            hyper: Hyper {
                lr: crate::optim::DEFAULT_ADAM_LR,
                ..Hyper::default()
            },
            grad_mode: GradMode::Average,
            align_weight: 0.5,
            align_mode: AlignMode::CrossEntropy,
            patience: 5,
            checkpoint_every: 0,
            threads: 0,
        }
    }
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub updates: usize,
    pub stopped_early: bool,
}

/// Per-sentence dropout RNG, deterministic in (seed, epoch, pair index).
fn row_rng(seed: u64, epoch: usize, pair_index: usize) -> ChaCha8Rng {
    let s = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(epoch as u64)
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(pair_index as u64);
    ChaCha8Rng::seed_from_u64(s)
}

/// Teacher-forced loss of one pair plus its guided-alignment penalty.
fn pair_loss(
    model: &Seq2SeqModel,
    tape: &mut Tape,
    pair: &TrainPair,
    align: Option<(AlignMode, f32)>,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<NodeId> {
    let tf = model.sequence_loss(tape, &pair.src, &pair.tgt, rng)?;
    let mut loss = tf.loss;
    if let (Some((mode, weight)), Some(a), Some(alphas)) =
        (align, pair.alignment.as_ref(), tf.alphas)
    {
        if weight != 0.0 {
            let cost = guided_alignment_cost(tape, a, alphas, mode)?;
            let scaled = tape.scale(cost, weight);
            loss = tape.add(loss, scaled);
        }
    }
    Ok(loss)
}

/// Whole-batch loss on a single tape: the sum of the per-row losses, rows
/// recovered through the masks. Padding positions never enter the graph, so
/// their gradient contribution is exactly zero.
pub fn batch_loss(
    model: &Seq2SeqModel,
    tape: &mut Tape,
    batch: &Batch,
    pairs: &[TrainPair],
    align: Option<(AlignMode, f32)>,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (r, &idx) in batch.indices.iter().enumerate() {
        let row_pair = TrainPair {
            src: batch.src_row(r),
            tgt: batch.tgt_row(r),
            alignment: pairs[idx].alignment.clone(),
        };
        let loss = pair_loss(model, tape, &row_pair, align, None)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss),
            None => loss,
        });
    }
    total.ok_or_else(|| Error::Data("empty batch".into()))
}

/// Gradients for one mini-batch: per-sentence tapes over the shared
/// read-only parameters, evaluated in parallel, reduced in index order.
/// Returns the summed gradients and the summed loss.
pub fn batch_gradients(
    model: &Seq2SeqModel,
    batch: &Batch,
    pairs: &[TrainPair],
    align: Option<(AlignMode, f32)>,
    dropout_seed: Option<(u64, usize)>,
) -> Result<(GradStore, f64)> {
    let results: Vec<Result<(GradStore, f64)>> = batch
        .indices
        .par_iter()
        .enumerate()
        .map(|(r, &idx)| {
            let row_pair = TrainPair {
                src: batch.src_row(r),
                tgt: batch.tgt_row(r),
                alignment: pairs[idx].alignment.clone(),
            };
            let mut tape = Tape::new(&model.params);
            let mut rng = dropout_seed.map(|(seed, epoch)| row_rng(seed, epoch, idx));
            let loss = pair_loss(
                model,
                &mut tape,
                &row_pair,
                align,
                rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
            )?;
            tape.forward(&Bindings::new())?;
            let value = tape.value(loss).item() as f64;
            let grads = tape.backward(loss)?;
            Ok((grads, value))
        })
        .collect();

    let mut total_grads = GradStore::empty(model.params.len());
    let mut total_loss = 0.0f64;
    for r in results {
        let (g, l) = r?;
        total_grads.accumulate(&g);
        total_loss += l;
    }
    Ok((total_grads, total_loss))
}

/// Mean per-token validation loss and perplexity under teacher forcing.
pub fn validate(model: &Seq2SeqModel, pairs: &[TrainPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let totals: Vec<Result<(f64, usize)>> = pairs
        .par_iter()
        .map(|p| {
            let mut tape = Tape::new(&model.params);
            let tf = model.sequence_loss(&mut tape, &p.src, &p.tgt, crate::seq2seq::no_dropout())?;
            tape.forward(&Bindings::new())?;
            Ok((
                tape.value(tf.loss).item() as f64,
                tf.per_token_nll.len(),
            ))
        })
        .collect();
    let mut loss = 0.0;
    let mut tokens = 0usize;
    for t in totals {
        let (l, n) = t?;
        loss += l;
        tokens += n;
    }
    let per_token = loss / tokens as f64;
    Ok((per_token, per_token.exp()))
}

/// Greedy-decoding token accuracy against references: positionwise matches
/// over the longer of output and reference, summed over the corpus.
pub fn token_accuracy(model: &Seq2SeqModel, pairs: &[TrainPair]) -> Result<f64> {
    let counts: Vec<Result<(usize, usize)>> = pairs
        .par_iter()
        .map(|p| {
            let hyp = crate::decode::greedy(model, &p.src)?;
            let reference = &p.tgt[1..]; // skip bos, keep eos
            let matches = hyp
                .tokens
                .iter()
                .zip(reference)
                .filter(|(a, b)| a == b)
                .count();
            Ok((matches, hyp.tokens.len().max(reference.len())))
        })
        .collect();
    let mut matched = 0usize;
    let mut total = 0usize;
    for c in counts {
        let (m, t) = c?;
        matched += m;
        total += t;
    }
    Ok(matched as f64 / total as f64)
}

/// Builds a guided-alignment matrix over marked dimensions from raw
/// (0-based, unmarked) target-source alignment points. Each predicted
/// position's row sums to 1; unaligned positions (the end marker included)
/// spread uniformly over the source.
pub fn alignment_matrix(
    points: &[(usize, usize)],
    raw_tgt_len: usize,
    raw_src_len: usize,
) -> Tensor {
    let rows = raw_tgt_len + 1; // predictions: every target token plus eos
    let cols = raw_src_len + 2; // marked source
    let mut m = Tensor::zeros(vec![rows, cols]);
    for i in 0..rows {
        let aligned: Vec<usize> = points
            .iter()
            .filter(|&&(t, _)| t == i)
            .map(|&(_, s)| s + 1) // shift past bos
            .filter(|&s| s < cols)
            .collect();
        if aligned.is_empty() {
            for j in 0..cols {
                m.data_mut()[i * cols + j] = 1.0 / cols as f32;
            }
        } else {
            let w = 1.0 / aligned.len() as f32;
            for &j in &aligned {
                m.data_mut()[i * cols + j] += w;
            }
        }
    }
    m
}

/// Runs the full epoch loop: shuffle, maxi/mini batching, gradient updates,
/// periodic checkpoints, validation with early stopping. Log lines are
/// tab-separated.
pub fn train(
    model: &mut Seq2SeqModel,
    pairs: &[TrainPair],
    valid: &[TrainPair],
    settings: &TrainSettings,
    log: &mut dyn Write,
    mut on_checkpoint: impl FnMut(usize, &Seq2SeqModel, &Optimizer) -> Result<()>,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let mut optimizer = Optimizer::new(settings.optimizer, settings.hyper, model.params.len());
    let mut report = TrainReport::default();
    let align = (settings.align_weight != 0.0).then_some((settings.align_mode, settings.align_weight));
    let dropout = model.config.dropout > 0.0;

    let pool = (settings.threads > 0)
        .then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(settings.threads)
                .build()
                .map_err(|e| Error::Data(format!("thread pool: {e}")))
        })
        .transpose()?;

    'epochs: for epoch in 0..settings.plan.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            settings.plan.shuffle_seed.wrapping_add(epoch as u64),
        );
        let batches = make_batches(pairs, &settings.plan, &mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_tokens = 0usize;
        for batch in &batches {
            let seed = dropout.then_some((settings.plan.shuffle_seed, epoch));
            let run = || batch_gradients(model, batch, pairs, align, seed);
            let (mut grads, loss) = match &pool {
                Some(p) => p.install(run)?,
                None => run()?,
            };
            if settings.grad_mode == GradMode::Average {
                grads.scale(1.0 / batch.rows() as f32);
            }
            optimizer.step(&mut model.params, &mut grads);
            report.updates += 1;
            epoch_loss += loss;
            epoch_tokens += batch
                .tgt_mask
                .iter()
                .map(|m| m.iter().filter(|&&x| x).count().saturating_sub(1))
                .sum::<usize>();

            if settings.checkpoint_every > 0 && report.updates % settings.checkpoint_every == 0
            {
                on_checkpoint(report.updates, model, &optimizer)?;
            }
            let every = settings.plan.validation_every;
            if every > 0 && report.updates % every == 0 && !valid.is_empty() {
                let (val_loss, val_ppl) = validate(model, valid)?;
                writeln!(
                    log,
                    "update\t{}\tval-loss\t{:.6}\tval-ppl\t{:.4}",
                    report.updates, val_loss, val_ppl
                )?;
                report.validation_loss.push(val_loss);
                if should_stop(&report.validation_loss, settings.patience) {
                    report.stopped_early = true;
                    break 'epochs;
                }
            }
        }
        let train_loss = epoch_loss / epoch_tokens.max(1) as f64;
        report.epoch_train_loss.push(train_loss);
        if settings.plan.validation_every == 0 && !valid.is_empty() {
            let (val_loss, val_ppl) = validate(model, valid)?;
            writeln!(
                log,
                "epoch\t{}\ttrain-loss\t{:.6}\tval-loss\t{:.6}\tval-ppl\t{:.4}",
                epoch + 1,
                train_loss,
                val_loss,
                val_ppl
            )?;
            report.validation_loss.push(val_loss);
            if should_stop(&report.validation_loss, settings.patience) {
                report.stopped_early = true;
                break;
            }
        } else {
            writeln!(log, "epoch\t{}\ttrain-loss\t{:.6}", epoch + 1, train_loss)?;
        }
    }
    on_checkpoint(report.updates, model, &optimizer)?;
    Ok(report)
}
