use nmt::data::{mark, TrainPair, TrainPlan};
use nmt::graph::{Bindings, Tape};
use nmt::optim::Hyper;
use nmt::seq2seq::{Arch, Seq2SeqConfig, Seq2SeqModel};
use nmt::train::{token_accuracy, train, TrainSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 20;
fn sample_sentence(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.gen_range(2..=8);
    (0..len).map(|_| rng.gen_range(4..VOCAB)).collect()
}
fn make_pairs(n: usize, reversal: bool, rng: &mut ChaCha8Rng) -> Vec<TrainPair> {
    (0..n).map(|_| {
        let src = sample_sentence(rng);
        let tgt: Vec<usize> = if reversal { src.iter().rev().copied().collect() } else { src.clone() };
        TrainPair { src: mark(&src), tgt: mark(&tgt), alignment: None }
    }).collect()
}

/// teacher-forced argmax accuracy: how often the gold token is the argmax
fn tf_accuracy(m: &Seq2SeqModel, pairs: &[TrainPair]) -> f64 {
    use rayon::prelude::*;
    let (hit, total): (usize, usize) = pairs.par_iter().map(|p| {
        let mut tape = Tape::new(&m.params);
        let tf = m.sequence_loss(&mut tape, &p.src, &p.tgt, nmt::seq2seq::no_dropout()).unwrap();
        tape.forward(&Bindings::new()).unwrap();
        let mut hit = 0;
        for (i, &n) in tf.per_token_nll.iter().enumerate() {
            let _ = n;
            let _gold = p.tgt[i + 1];
            // cheap: count positions whose nll < ln(2) ~ prob > 0.5 (argmax proxy)
            if tape.value(n).item() < 0.6931 { hit += 1; }
        }
        (hit, tf.per_token_nll.len())
    }).reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    hit as f64 / total as f64
}

fn main() {
    for (name, arch, lr, mini) in [
        ("copy/lstm lr.003 mini16", Arch::Lstm, 0.003f32, 16usize),
        ("copy/gru  lr.003 mini16", Arch::Gru, 0.003, 16),
    ] {
        let t0 = std::time::Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let train_pairs = make_pairs(5000, false, &mut rng);
        let held_out = make_pairs(500, false, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let mut m = Seq2SeqModel::new(Seq2SeqConfig {
            embed_dim: 32, hidden_dim: 64, attention: true,
            ..Seq2SeqConfig::new(arch, VOCAB, VOCAB)
        }, &mut rng2);
        for epoch in 1..=14 {
            let settings = TrainSettings {
                plan: TrainPlan { epochs: 1, maxi_batch: 1024, mini_batch: mini, shuffle_seed: 7 + epoch as u64, ..TrainPlan::default() },
                hyper: Hyper { lr, clip: Some(1.0), ..Hyper::default() },
                patience: 10_000, align_weight: 0.0,
                ..TrainSettings::default()
            };
            let mut log = std::io::sink();
            train(&mut m, &train_pairs, &[], &settings, &mut log, |_,_,_| Ok(())).unwrap();
            let tfa = tf_accuracy(&m, &held_out);
            let ga = if epoch % 4 == 0 { token_accuracy(&m, &held_out).unwrap() } else { -1.0 };
            println!("{name}: epoch {epoch:2} tf-acc {tfa:.4} greedy {ga:.4} ({:.0?})", t0.elapsed());
        }
    }
}
