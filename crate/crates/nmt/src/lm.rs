//! Feed-forward n-gram and recurrent language models, with likelihood,
//! self-normalizing, and noise-contrastive training objectives.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Bindings, NodeId, ParamId, ParamSet, Tape};
use crate::layers::{
    init_weights, CellKind, CellState, DepthMode, Embedding, LayerKind, RnnStack,
};
use crate::tensor::Tensor;

/// Raw scores and the normalized distribution for one prediction.
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub scores: NodeId,
    pub probs: NodeId,
}

#[derive(Debug, Clone)]
pub struct FfLmConfig {
    pub vocab: usize,
    /// Number of context words (n-1 for an n-gram model).
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Direct connections from context embeddings to the output scores.
    pub direct: bool,
}

/// Feed-forward n-gram language model: context words are embedded with a
/// shared table, combined through per-position matrices into a tanh hidden
/// layer, and projected to a softmax over the vocabulary.
pub struct FfLm {
    pub params: ParamSet,
    pub config: FfLmConfig,
    embedding: Embedding,
    h_mats: Vec<ParamId>,
    b_h: ParamId,
    w_out: ParamId,
    u_direct: Option<ParamId>,
}

impl FfLm {
    pub fn new(config: FfLmConfig, rng: &mut impl Rng) -> FfLm {
        assert!(config.context >= 1);
        let mut params = ParamSet::new();
        let embedding = Embedding::new("lm.embed", config.vocab, config.embed_dim, &mut params, rng);
        let h_mats = (0..config.context)
            .map(|j| {
                params.add(
                    format!("lm.h{j}"),
                    init_weights(
                        &[config.hidden_dim, config.embed_dim],
                        LayerKind::Hidden,
                        rng,
                    ),
                )
            })
            .collect();
        let b_h = params.add("lm.b_h", Tensor::zeros(vec![config.hidden_dim]));
        let w_out = params.add(
            "lm.w_out",
            init_weights(&[config.vocab, config.hidden_dim], LayerKind::Output, rng),
        );
        let u_direct = config.direct.then(|| {
            params.add(
                "lm.u_direct",
                init_weights(&[config.vocab, config.embed_dim], LayerKind::Output, rng),
            )
        });
        FfLm {
            params,
            config,
            embedding,
            h_mats,
            b_h,
            w_out,
            u_direct,
        }
    }

    fn check_context(&self, context: &[usize]) -> Result<()> {
        if context.len() != self.config.context {
            return Err(Error::Data(format!(
                "model takes {} context words, got {}",
                self.config.context,
                context.len()
            )));
        }
        Ok(())
    }

    /// Hidden layer: tanh(b_h + sum_j H_j C(w_j)).
    pub fn hidden(&self, tape: &mut Tape, context: &[usize]) -> Result<NodeId> {
        self.check_context(context)?;
        let mut acc = tape.param(self.b_h);
        for (j, &id) in context.iter().enumerate() {
            let e = self.embedding.embed(tape, id)?;
            let h = tape.param(self.h_mats[j]);
            let he = tape.matmul(h, e);
            acc = tape.add(acc, he);
        }
        Ok(tape.tanh(acc))
    }

    /// Full prediction over the vocabulary.
    pub fn forward(&self, tape: &mut Tape, context: &[usize]) -> Result<Prediction> {
        let h = self.hidden(tape, context)?;
        let w = tape.param(self.w_out);
        let mut scores = tape.matmul(w, h);
        if let Some(u) = self.u_direct {
            let u = tape.param(u);
            for &id in context {
                let e = self.embedding.embed(tape, id)?;
                let ue = tape.matmul(u, e);
                scores = tape.add(scores, ue);
            }
        }
        let probs = tape.softmax(scores);
        Ok(Prediction { scores, probs })
    }

    /// Raw score of a single word, without computing the other outputs.
    /// This is the quantity noise-contrastive training works on.
    pub fn word_score(&self, tape: &mut Tape, context: &[usize], word: usize) -> Result<NodeId> {
        let h = self.hidden(tape, context)?;
        let w = tape.param(self.w_out);
        let w_k = tape.rows(w, &[word])?;
        let mut score = tape.dot(w_k, h);
        if let Some(u) = self.u_direct {
            let u = tape.param(u);
            let u_k = tape.rows(u, &[word])?;
            for &id in context {
                let e = self.embedding.embed(tape, id)?;
                let ue = tape.dot(u_k, e);
                score = tape.add(score, ue);
            }
        }
        Ok(score)
    }

    /// log Z(x) = log sum_j exp(s_j) for a context, evaluated outside any
    /// training tape.
    pub fn log_partition(&self, context: &[usize]) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let pred = self.forward(&mut tape, context)?;
        tape.forward(&Bindings::new())?;
        let scores = tape.value(pred.scores);
        let max = scores
            .data()
            .iter()
            .cloned()
            .fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = scores.data().iter().map(|&v| (v as f64 - max).exp()).sum();
        Ok(max + sum.ln())
    }
}

/// Likelihood loss of the true word under a predicted distribution; exactly
/// the negative log-likelihood node.
pub fn lm_likelihood_loss(tape: &mut Tape, probs: NodeId, true_id: usize) -> Result<NodeId> {
    tape.nll_loss(probs, true_id)
}

/// Likelihood plus the self-normalization penalty alpha * log^2 Z(x) on the
/// raw scores.
pub fn selfnorm_loss(
    tape: &mut Tape,
    pred: Prediction,
    true_id: usize,
    alpha: f32,
) -> Result<NodeId> {
    let nll = tape.nll_loss(pred.probs, true_id)?;
    if alpha == 0.0 {
        return Ok(nll);
    }
    let log_z = tape.log_sum_exp(pred.scores);
    let sq = tape.hadamard(log_z, log_z);
    let pen = tape.scale(sq, alpha);
    Ok(tape.add(nll, pen))
}

/// Noise-contrastive loss contribution for one example. `score` is the raw
/// model score s_k (the model probability is the unnormalized e^{s_k});
/// `noise_prob` is p_n(word) under the noise distribution.
///
/// p(correct) = e^s / (e^s + p_n) = sigmoid(s - ln p_n), so the loss is
/// -log sigmoid(z) for true examples and -log sigmoid(-z) for noise.
pub fn nce_loss(tape: &mut Tape, score: NodeId, noise_prob: f64, is_true: bool) -> NodeId {
    assert!(noise_prob > 0.0, "noise distribution must be positive");
    let z = tape.add_scalar(score, -(noise_prob.ln()) as f32);
    let z = if is_true { z } else { tape.neg(z) };
    let p = tape.sigmoid(z);
    let lp = tape.log(p);
    tape.neg(lp)
}

/// Add-1 smoothed unigram distribution over a vocabulary, for use as the
/// NCE noise distribution.
pub fn unigram_noise(corpus: &[Vec<usize>], vocab: usize) -> Vec<f64> {
    let mut counts = vec![1.0f64; vocab];
    let mut total = vocab as f64;
    for sent in corpus {
        for &id in sent {
            counts[id] += 1.0;
            total += 1.0;
        }
    }
    for c in &mut counts {
        *c /= total;
    }
    counts
}

/// How far gradients flow back through time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unroll {
    /// The whole sentence is one computation graph.
    Full,
    /// Back-propagation through time is cut every k steps.
    Truncated(usize),
}

#[derive(Debug, Clone)]
pub struct RnnLmConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub cell: CellKind,
    pub depth: usize,
    pub depth_mode: DepthMode,
}

impl RnnLmConfig {
    pub fn small(vocab: usize) -> RnnLmConfig {
        RnnLmConfig {
            vocab,
            embed_dim: 16,
            hidden_dim: 32,
            cell: CellKind::Gru,
            depth: 1,
            depth_mode: DepthMode::Stacked,
        }
    }
}

/// Recurrent language model: the hidden state is threaded through time and
/// each position predicts the next word.
pub struct RnnLm {
    pub params: ParamSet,
    pub config: RnnLmConfig,
    embedding: Embedding,
    stack: RnnStack,
    w_out: ParamId,
}

impl RnnLm {
    pub fn new(config: RnnLmConfig, rng: &mut impl Rng) -> RnnLm {
        let mut params = ParamSet::new();
        let embedding = Embedding::new("lm.embed", config.vocab, config.embed_dim, &mut params, rng);
        let stack = RnnStack::new(
            config.cell,
            "lm.rnn",
            config.embed_dim,
            config.hidden_dim,
            config.depth,
            config.depth_mode,
            &mut params,
            rng,
        );
        let w_out = params.add(
            "lm.w_out",
            init_weights(&[config.vocab, config.hidden_dim], LayerKind::Output, rng),
        );
        RnnLm {
            params,
            config,
            embedding,
            stack,
            w_out,
        }
    }

    /// One prediction per position: element i is the distribution over the
    /// word following `sentence[i]`. The sentence must start with the
    /// start-of-sentence id and is processed with the configured unrolling.
    pub fn forward(
        &self,
        tape: &mut Tape,
        sentence: &[usize],
        unroll: Unroll,
    ) -> Result<Vec<Prediction>> {
        if sentence.is_empty() {
            return Err(Error::Data("empty sentence".into()));
        }
        let mut states = self.stack.zero_states(tape);
        let mut preds = Vec::with_capacity(sentence.len().saturating_sub(1));
        let w_out = tape.param(self.w_out);
        for (i, &id) in sentence[..sentence.len() - 1].iter().enumerate() {
            if let Unroll::Truncated(k) = unroll {
                assert!(k >= 1, "truncation window must be at least 1");
                if i > 0 && i % k == 0 {
                    for s in &mut states {
                        s.h = tape.detach(s.h);
                        s.m = s.m.map(|m| tape.detach(m));
                    }
                }
            }
            let e = self.embedding.embed(tape, id)?;
            let (new_states, top) = self.stack.step(tape, e, &states);
            states = new_states;
            let scores = tape.matmul(w_out, top);
            let probs = tape.softmax(scores);
            preds.push(Prediction { scores, probs });
        }
        Ok(preds)
    }

    /// Teacher-forced negative log-likelihood of a whole sentence as a single
    /// loss node.
    pub fn sentence_loss(
        &self,
        tape: &mut Tape,
        sentence: &[usize],
        unroll: Unroll,
    ) -> Result<NodeId> {
        let preds = self.forward(tape, sentence, unroll)?;
        let mut loss: Option<NodeId> = None;
        for (i, p) in preds.iter().enumerate() {
            let nll = tape.nll_loss(p.probs, sentence[i + 1])?;
            loss = Some(match loss {
                Some(acc) => tape.add(acc, nll),
                None => nll,
            });
        }
        loss.ok_or_else(|| Error::Data("sentence has no predictions".into()))
    }

    /// Hidden states after consuming a full sentence.
    pub fn final_state(&self, tape: &mut Tape, sentence: &[usize]) -> Result<Vec<CellState>> {
        let mut states = self.stack.zero_states(tape);
        for &id in sentence {
            let e = self.embedding.embed(tape, id)?;
            let (new_states, _) = self.stack.step(tape, e, &states);
            states = new_states;
        }
        Ok(states)
    }
}

/// exp(mean per-token negative log-likelihood) over a corpus. Sentences
/// include the start marker; every following token, end-of-sentence
/// included, counts toward the mean.
pub fn perplexity(model: &RnnLm, corpus: &[Vec<usize>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut total_nll = 0.0f64;
    let mut tokens = 0usize;
    for sentence in corpus {
        let mut tape = Tape::new(&model.params);
        let preds = model.forward(&mut tape, sentence, Unroll::Full)?;
        tape.forward(&Bindings::new())?;
        for (i, p) in preds.iter().enumerate() {
            let prob = tape.value(p.probs).data()[sentence[i + 1]] as f64;
            total_nll += -prob.max(crate::graph::LOG_CLAMP as f64).ln();
            tokens += 1;
        }
    }
    Ok((total_nll / tokens as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Hyper, Optimizer, OptimizerKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    fn run(tape: &mut Tape) {
        tape.forward(&Bindings::new()).unwrap();
    }

    #[test]
    fn fflm_outputs_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lm = FfLm::new(
            FfLmConfig {
                vocab: 7,
                context: 2,
                embed_dim: 4,
                hidden_dim: 5,
                direct: true,
            },
            &mut rng,
        );
        let mut tape = Tape::new(&lm.params);
        let pred = lm.forward(&mut tape, &[3, 5]).unwrap();
        run(&mut tape);
        let p = tape.value(pred.probs);
        assert!(close(p.sum() as f32, 1.0, 1e-6));
        assert!(p.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn fflm_wrong_context_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lm = FfLm::new(
            FfLmConfig {
                vocab: 7,
                context: 2,
                embed_dim: 4,
                hidden_dim: 5,
                direct: false,
            },
            &mut rng,
        );
        let mut tape = Tape::new(&lm.params);
        assert!(lm.forward(&mut tape, &[3]).is_err());
    }

    #[test]
    fn fflm_tied_positions_are_permutation_invariant() {
        // with identical per-position matrices, swapping context words
        // cannot change the output (shared embedding matrix C)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lm = FfLm::new(
            FfLmConfig {
                vocab: 6,
                context: 2,
                embed_dim: 3,
                hidden_dim: 4,
                direct: false,
            },
            &mut rng,
        );
        let h0 = lm.params.value(lm.h_mats[0]).clone();
        *lm.params.value_mut(lm.h_mats[1]) = h0;

        let mut tape = Tape::new(&lm.params);
        let a = lm.forward(&mut tape, &[2, 4]).unwrap();
        let b = lm.forward(&mut tape, &[4, 2]).unwrap();
        run(&mut tape);
        for (x, y) in tape
            .value(a.probs)
            .data()
            .iter()
            .zip(tape.value(b.probs).data())
        {
            assert!(close(*x, *y, 1e-6));
        }
    }

    #[test]
    fn fflm_matches_kernel_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lm = FfLm::new(
            FfLmConfig {
                vocab: 5,
                context: 2,
                embed_dim: 3,
                hidden_dim: 4,
                direct: false,
            },
            &mut rng,
        );
        let ctx = [1usize, 4];
        let mut tape = Tape::new(&lm.params);
        let pred = lm.forward(&mut tape, &ctx).unwrap();
        run(&mut tape);

        // hand-composed kernel oracle
        let mut acc = lm.params.value(lm.b_h).clone();
        for (j, &id) in ctx.iter().enumerate() {
            let e = Tensor::vector(lm.params.value(lm.embedding.table).row(id).to_vec());
            let he = crate::tensor::matmul(lm.params.value(lm.h_mats[j]), &e).unwrap();
            acc = acc.add(&he);
        }
        let h = crate::tensor::activation(crate::tensor::Activation::Tanh, &acc);
        let s = crate::tensor::matmul(lm.params.value(lm.w_out), &h).unwrap();
        let want = crate::tensor::softmax(&s);
        for (g, w) in tape.value(pred.probs).data().iter().zip(want.data()) {
            assert!(close(*g, *w, 1e-6));
        }
    }

    #[test]
    fn selfnorm_penalty_vanishes_when_z_is_one() {
        // scores chosen so sum exp(s) = 1: two entries of -ln 2
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let scores = tape.constant(Tensor::vector(vec![-(2.0f32.ln()); 2]));
        let probs = tape.softmax(scores);
        let pred = Prediction { scores, probs };
        let loss = selfnorm_loss(&mut tape, pred, 0, 0.7).unwrap();
        let nll = tape.nll_loss(probs, 0).unwrap();
        run(&mut tape);
        assert!(close(tape.value(loss).item(), tape.value(nll).item(), 1e-6));
    }

    #[test]
    fn selfnorm_alpha_zero_is_plain_nll() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let scores = tape.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let probs = tape.softmax(scores);
        let pred = Prediction { scores, probs };
        let loss = selfnorm_loss(&mut tape, pred, 2, 0.0).unwrap();
        let nll = tape.nll_loss(probs, 2).unwrap();
        run(&mut tape);
        assert_eq!(tape.value(loss).item(), tape.value(nll).item());
    }

    #[test]
    fn selfnorm_matches_direct_formula() {
        let raw = vec![0.9f32, -0.4, 1.7, 0.0];
        let alpha = 0.25f32;
        let k = 1usize;
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let scores = tape.constant(Tensor::vector(raw.clone()));
        let probs = tape.softmax(scores);
        let loss = selfnorm_loss(&mut tape, Prediction { scores, probs }, k, alpha).unwrap();
        run(&mut tape);
        // direct f64 oracle
        let z: f64 = raw.iter().map(|&s| (s as f64).exp()).sum();
        let p_k = (raw[k] as f64).exp() / z;
        let want = -p_k.ln() + alpha as f64 * z.ln().powi(2);
        assert!(close(tape.value(loss).item(), want as f32, 1e-5));
    }

    #[test]
    fn nce_balanced_scores_cost_log_two() {
        let p_n = 0.125f64;
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        // raw score s with e^s = p_n
        let s = tape.constant(Tensor::scalar(p_n.ln() as f32));
        let loss_true = nce_loss(&mut tape, s, p_n, true);
        let loss_noise = nce_loss(&mut tape, s, p_n, false);
        run(&mut tape);
        assert!(close(tape.value(loss_true).item(), 2.0f32.ln(), 1e-5));
        assert!(close(tape.value(loss_noise).item(), 2.0f32.ln(), 1e-5));
    }

    #[test]
    fn nce_vanishing_noise_probability() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let s = tape.constant(Tensor::scalar(0.0));
        let loss = nce_loss(&mut tape, s, 1e-9, true);
        run(&mut tape);
        // p(correct) -> 1, loss -> 0
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn nce_batch_matches_double_sum_oracle() {
        let true_scores = [0.4f64, -0.3, 1.2];
        let noise_scores = [0.1f64, -0.8, 0.6];
        let p_n = [0.2f64, 0.05, 0.4];
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let mut total: Option<NodeId> = None;
        for (i, &s) in true_scores.iter().enumerate() {
            let n = tape.constant(Tensor::scalar(s as f32));
            let l = nce_loss(&mut tape, n, p_n[i], true);
            let l = tape.scale(l, 1.0 / (2.0 * true_scores.len() as f32));
            total = Some(total.map_or(l, |t| tape.add(t, l)));
        }
        for (i, &s) in noise_scores.iter().enumerate() {
            let n = tape.constant(Tensor::scalar(s as f32));
            let l = nce_loss(&mut tape, n, p_n[i], false);
            let l = tape.scale(l, 1.0 / (2.0 * noise_scores.len() as f32));
            total = Some(total.map_or(l, |t| tape.add(t, l)));
        }
        run(&mut tape);
        // the objective maximizes log p(correct) terms; the loss negates them
        let mut want = 0.0f64;
        for (i, &s) in true_scores.iter().enumerate() {
            let pm = s.exp();
            want -= (pm / (pm + p_n[i])).ln() / (2.0 * true_scores.len() as f64);
        }
        for (i, &s) in noise_scores.iter().enumerate() {
            let pm = s.exp();
            want -= (1.0 - pm / (pm + p_n[i])).ln() / (2.0 * noise_scores.len() as f64);
        }
        assert!(close(tape.value(total.unwrap()).item(), want as f32, 1e-5));
    }

    #[test]
    fn unigram_noise_sums_to_one() {
        let corpus = vec![vec![0, 1, 1, 3], vec![2, 2, 2]];
        let p = unigram_noise(&corpus, 5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
        assert!(p[2] > p[4]);
    }

    #[test]
    fn rnnlm_single_prediction_is_one_step_from_start_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lm = RnnLm::new(RnnLmConfig::small(6), &mut rng);
        let mut tape = Tape::new(&lm.params);
        let preds = lm.forward(&mut tape, &[2, 4], Unroll::Full).unwrap();
        assert_eq!(preds.len(), 1);
        run(&mut tape);
        let p = tape.value(preds[0].probs);
        assert!(close(p.sum() as f32, 1.0, 1e-6));
    }

    #[test]
    fn rnnlm_empty_sentence_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lm = RnnLm::new(RnnLmConfig::small(6), &mut rng);
        let mut tape = Tape::new(&lm.params);
        assert!(lm.forward(&mut tape, &[], Unroll::Full).is_err());
    }

    #[test]
    fn rnnlm_truncation_with_large_window_equals_full_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lm = RnnLm::new(RnnLmConfig::small(6), &mut rng);
        let sent = vec![2usize, 4, 1, 5, 3];

        let mut t1 = Tape::new(&lm.params);
        let l1 = lm.sentence_loss(&mut t1, &sent, Unroll::Full).unwrap();
        run(&mut t1);
        let g1 = t1.backward(l1).unwrap();

        let mut t2 = Tape::new(&lm.params);
        let l2 = lm
            .sentence_loss(&mut t2, &sent, Unroll::Truncated(sent.len()))
            .unwrap();
        run(&mut t2);
        let g2 = t2.backward(l2).unwrap();

        assert_eq!(t1.value(l1).item(), t2.value(l2).item());
        for (id, g) in g1.iter() {
            let other = g2.get(id).expect("gradient present in both");
            for (a, b) in g.data().iter().zip(other.data()) {
                assert!(close(*a, *b, 1e-7));
            }
        }
    }

    #[test]
    fn rnnlm_truncation_keeps_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lm = RnnLm::new(RnnLmConfig::small(6), &mut rng);
        let sent = vec![2usize, 4, 1, 5, 3, 1, 4];

        let mut t1 = Tape::new(&lm.params);
        let l1 = lm.sentence_loss(&mut t1, &sent, Unroll::Full).unwrap();
        run(&mut t1);

        let mut t2 = Tape::new(&lm.params);
        let l2 = lm
            .sentence_loss(&mut t2, &sent, Unroll::Truncated(2))
            .unwrap();
        run(&mut t2);
        assert!(close(t1.value(l1).item(), t2.value(l2).item(), 1e-6));
    }

    #[test]
    fn deep_variants_reduce_to_shallow_at_depth_one() {
        for mode in [DepthMode::Stacked, DepthMode::Transition] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let shallow = RnnLm::new(RnnLmConfig::small(6), &mut rng);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let deep = RnnLm::new(
                RnnLmConfig {
                    depth: 1,
                    depth_mode: mode,
                    ..RnnLmConfig::small(6)
                },
                &mut rng,
            );
            let sent = vec![2usize, 4, 1, 5];
            let mut t1 = Tape::new(&shallow.params);
            let p1 = shallow.forward(&mut t1, &sent, Unroll::Full).unwrap();
            run(&mut t1);
            let mut t2 = Tape::new(&deep.params);
            let p2 = deep.forward(&mut t2, &sent, Unroll::Full).unwrap();
            run(&mut t2);
            for (a, b) in p1.iter().zip(&p2) {
                for (x, y) in t1
                    .value(a.probs)
                    .data()
                    .iter()
                    .zip(t2.value(b.probs).data())
                {
                    assert!(close(*x, *y, 1e-7), "{:?}", mode);
                }
            }
        }
    }

    #[test]
    fn perplexity_of_uniform_model_is_vocab_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut lm = RnnLm::new(RnnLmConfig::small(6), &mut rng);
        // zero output weights: scores all zero, distribution uniform
        let w = lm.params.value_mut(lm.w_out);
        *w = Tensor::zeros(w.shape().to_vec());
        let corpus = vec![vec![2, 4, 1, 3], vec![2, 5, 3]];
        let ppl = perplexity(&lm, &corpus).unwrap();
        assert!((ppl - 6.0).abs() < 1e-3, "{ppl}");
    }

    #[test]
    fn perplexity_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lm = RnnLm::new(RnnLmConfig::small(5), &mut rng);
        let corpus = vec![vec![2usize, 4, 3], vec![2usize, 1, 1, 3]];
        let ppl = perplexity(&lm, &corpus).unwrap();
        // hand computation over each prediction
        let mut nll = 0.0f64;
        let mut count = 0usize;
        for sent in &corpus {
            let mut tape = Tape::new(&lm.params);
            let preds = lm.forward(&mut tape, sent, Unroll::Full).unwrap();
            run(&mut tape);
            for (i, p) in preds.iter().enumerate() {
                nll += -(tape.value(p.probs).data()[sent[i + 1]] as f64).ln();
                count += 1;
            }
        }
        assert!((ppl - (nll / count as f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn perplexity_of_empty_corpus_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let lm = RnnLm::new(RnnLmConfig::small(5), &mut rng);
        assert!(perplexity(&lm, &[]).is_err());
    }

    #[test]
    fn memorizer_reaches_perplexity_one() {
        // train a tiny model on a single sentence until it memorizes it
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut lm = RnnLm::new(
            RnnLmConfig {
                vocab: 5,
                embed_dim: 8,
                hidden_dim: 12,
                cell: CellKind::Gru,
                depth: 1,
                depth_mode: DepthMode::Stacked,
            },
            &mut rng,
        );
        let sent = vec![2usize, 4, 1, 4, 3];
        let mut opt = Optimizer::new(
            OptimizerKind::Adam,
            Hyper {
                lr: 0.01,
                ..Hyper::default()
            },
            lm.params.len(),
        );
        for _ in 0..400 {
            let mut tape = Tape::new(&lm.params);
            let loss = lm.sentence_loss(&mut tape, &sent, Unroll::Full).unwrap();
            run(&mut tape);
            let mut grads = tape.backward(loss).unwrap();
            opt.step(&mut lm.params, &mut grads);
        }
        let ppl = perplexity(&lm, &[sent]).unwrap();
        assert!(ppl < 1.05, "perplexity {ppl}");
    }
}
