//! Decoding strategies on a quickly trained toy model: greedy vs beam
//! search, n-best lists, length normalization, checkpoint-style ensembles,
//! and forced decoding.

use nmt::data::{mark, TrainPair, TrainPlan};
use nmt::decode::{beam_search, force_score, greedy, BeamConfig, EnsembleSpec, NBestEntry};
use nmt::optim::Hyper;
use nmt::seq2seq::{Arch, Seq2SeqConfig, Seq2SeqModel};
use nmt::train::{train, TrainSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 14;

fn make_pairs(n: usize, rng: &mut ChaCha8Rng) -> Vec<TrainPair> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..=5);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(4..VOCAB)).collect();
            let tgt: Vec<usize> = src.iter().rev().copied().collect();
            TrainPair {
                src: mark(&src),
                tgt: mark(&tgt),
                alignment: None,
            }
        })
        .collect()
}

fn main() {
    // train two small reversal models from different seeds (a two-member
    // "multi-run ensemble")
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs = make_pairs(1200, &mut rng);
    let mut models = Vec::new();
    for seed in [1u64, 2] {
        let mut mrng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Seq2SeqModel::new(
            Seq2SeqConfig {
                embed_dim: 24,
                hidden_dim: 48,
                ..Seq2SeqConfig::new(Arch::Gru, VOCAB, VOCAB)
            },
            &mut mrng,
        );
        let settings = TrainSettings {
            plan: TrainPlan {
                epochs: 10,
                maxi_batch: 1200,
                mini_batch: 24,
                shuffle_seed: seed,
                ..TrainPlan::default()
            },
            hyper: Hyper {
                lr: 0.01,
                clip: Some(5.0),
                ..Hyper::default()
            },
            patience: 10_000,
            align_weight: 0.0,
            ..TrainSettings::default()
        };
        let mut log = std::io::sink();
        train(&mut m, &pairs, &[], &settings, &mut log, |_, _, _| Ok(())).unwrap();
        models.push(m);
    }

    let src = mark(&[5, 9, 12, 7]);
    println!("source (ids): {:?}\n", &src[1..src.len() - 1]);

    println!("== greedy ==");
    let g = greedy(&models[0], &src).unwrap();
    println!("tokens {:?}  score {:.4}\n", g.tokens, g.score);

    println!("== beam 5, n-best ==");
    let single = EnsembleSpec::new(vec![&models[0]]).unwrap();
    let hyps = beam_search(&single, &src, &BeamConfig::new(5)).unwrap();
    for (i, h) in hyps.iter().enumerate() {
        let entry = NBestEntry {
            sentence_id: 0,
            tokens: h.tokens.iter().map(|t| t.to_string()).collect(),
            score: h.final_score,
        };
        println!("{i}: {}", entry.to_line());
    }

    println!("\n== beam 5 with length normalization ==");
    let cfg = BeamConfig {
        normalize: true,
        ..BeamConfig::new(5)
    };
    let hyps = beam_search(&single, &src, &cfg).unwrap();
    println!(
        "best: {:?}  raw {:.4}  normalized {:.4}",
        hyps[0].tokens, hyps[0].score, hyps[0].final_score
    );

    println!("\n== two-model ensemble ==");
    let both = EnsembleSpec::new(models.iter().collect()).unwrap();
    let hyps = beam_search(&both, &src, &BeamConfig::new(5)).unwrap();
    println!("best: {:?}  score {:.4}", hyps[0].tokens, hyps[0].score);

    println!("\n== forced decoding of the beam winner ==");
    let mut tgt = vec![nmt::data::BOS_ID];
    tgt.extend(&hyps[0].tokens);
    let (per_token, total) = force_score(&models[0], &src, &tgt).unwrap();
    println!("per-token log-probs: {per_token:.3?}");
    println!("total {total:.4}");
}
