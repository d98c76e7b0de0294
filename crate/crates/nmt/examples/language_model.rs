//! Trains a small recurrent language model on a toy corpus, tracks
//! perplexity, and demonstrates the self-normalizing objective: the
//! partition function Z(x) is pushed toward 1 so raw scores become usable
//! without a softmax.

use nmt::data::{Vocab, BOS_ID, EOS_ID};
use nmt::graph::{Bindings, Tape};
use nmt::layers::{CellKind, DepthMode};
use nmt::lm::{perplexity, selfnorm_loss, FfLm, FfLmConfig, RnnLm, RnnLmConfig, Unroll};
use nmt::optim::{Hyper, Optimizer, OptimizerKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CORPUS: &[&str] = &[
    "the cat sat on the mat",
    "the dog sat on the rug",
    "a cat ran after the dog",
    "the dog ran after a cat",
    "a dog sat on the mat",
    "the cat ran after the dog",
];

fn main() {
    let vocab = Vocab::build(CORPUS.iter().copied(), 40).unwrap();
    let sentences: Vec<Vec<usize>> = CORPUS
        .iter()
        .map(|line| {
            let mut ids = vec![BOS_ID];
            ids.extend(vocab.encode_line(line));
            ids.push(EOS_ID);
            ids
        })
        .collect();

    println!("== recurrent language model ==");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut lm = RnnLm::new(
        RnnLmConfig {
            vocab: vocab.len(),
            embed_dim: 16,
            hidden_dim: 32,
            cell: CellKind::Lstm,
            depth: 1,
            depth_mode: DepthMode::Stacked,
        },
        &mut rng,
    );
    let mut opt = Optimizer::new(
        OptimizerKind::Adam,
        Hyper {
            lr: 0.01,
            ..Hyper::default()
        },
        lm.params.len(),
    );
    for epoch in 1..=60 {
        for sent in &sentences {
            let mut tape = Tape::new(&lm.params);
            let loss = lm.sentence_loss(&mut tape, sent, Unroll::Full).unwrap();
            tape.forward(&Bindings::new()).unwrap();
            let mut grads = tape.backward(loss).unwrap();
            opt.step(&mut lm.params, &mut grads);
        }
        if epoch % 15 == 0 {
            let ppl = perplexity(&lm, &sentences).unwrap();
            println!("epoch {epoch:3}  training perplexity {ppl:.3}");
        }
    }

    println!("\n== self-normalizing feed-forward model ==");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ff = FfLm::new(
        FfLmConfig {
            vocab: vocab.len(),
            context: 2,
            embed_dim: 12,
            hidden_dim: 24,
            direct: false,
        },
        &mut rng,
    );
    // training trigrams
    let mut trigrams = Vec::new();
    for sent in &sentences {
        for w in sent.windows(3) {
            trigrams.push(([w[0], w[1]], w[2]));
        }
    }
    let held_out: Vec<[usize; 2]> = trigrams.iter().map(|(c, _)| *c).collect();
    let mean_abs_log_z = |ff: &FfLm| -> f64 {
        held_out
            .iter()
            .map(|c| ff.log_partition(c).unwrap().abs())
            .sum::<f64>()
            / held_out.len() as f64
    };

    println!("mean |log Z| untrained: {:.3}", mean_abs_log_z(&ff));
    let mut opt = Optimizer::new(
        OptimizerKind::Adam,
        Hyper {
            lr: 0.01,
            ..Hyper::default()
        },
        ff.params.len(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for step in 1..=600 {
        let (ctx, tgt) = trigrams[rng.gen_range(0..trigrams.len())];
        let mut tape = Tape::new(&ff.params);
        let pred = ff.forward(&mut tape, &ctx).unwrap();
        let loss = selfnorm_loss(&mut tape, pred, tgt, 0.1).unwrap();
        tape.forward(&Bindings::new()).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        opt.step(&mut ff.params, &mut grads);
        if step % 200 == 0 {
            println!("step {step:4}  mean |log Z| {:.3}", mean_abs_log_z(&ff));
        }
    }
    println!(
        "raw scores are now approximately normalized: |log Z| ~ {:.3}",
        mean_abs_log_z(&ff)
    );
}
