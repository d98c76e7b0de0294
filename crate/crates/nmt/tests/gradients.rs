//! Finite-difference gradient checks: every registered op, random composite
//! graphs, the recurrent cells, attention, and the objectives.

mod common;

use common::check_gradients;
use nmt::graph::{NodeId, ParamSet, Tape};
use nmt::layers::{CellKind, GruBias, GruCell, LstmCell, RnnCell};
use nmt::lm::{nce_loss, selfnorm_loss, Prediction};
use nmt::seq2seq::{
    self, guided_alignment_cost, transformer_cross_attention, AlignMode, AttentionParams,
    SelfAttentionLayer,
};
use nmt::tensor::{Activation, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data)
}

#[test]
fn elementwise_and_reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    type Build = Box<dyn Fn(&mut Tape, NodeId) -> NodeId>;
    let cases: Vec<(&str, Build)> = vec![
        ("sigmoid", Box::new(|t: &mut Tape, x| t.sigmoid(x))),
        ("tanh", Box::new(|t: &mut Tape, x| t.tanh(x))),
        // relu inputs are sampled away from the kink below
        ("relu", Box::new(|t: &mut Tape, x| t.relu(x))),
        ("softmax", Box::new(|t: &mut Tape, x| t.softmax(x))),
        ("exp", Box::new(|t: &mut Tape, x| t.exp(x))),
        (
            "log",
            Box::new(|t: &mut Tape, x| {
                let shifted = t.add_scalar(x, 3.0); // keep the argument positive
                t.log(shifted)
            }),
        ),
        ("scale", Box::new(|t: &mut Tape, x| t.scale(x, -1.7))),
        ("add_scalar", Box::new(|t: &mut Tape, x| t.add_scalar(x, 0.3))),
        (
            "reciprocal",
            Box::new(|t: &mut Tape, x| {
                let shifted = t.add_scalar(x, 3.0);
                t.reciprocal(shifted)
            }),
        ),
        ("log_sum_exp", Box::new(|t: &mut Tape, x| t.log_sum_exp(x))),
        ("element", Box::new(|t: &mut Tape, x| t.element(x, 2))),
        ("hadamard_self", Box::new(|t: &mut Tape, x| t.hadamard(x, x))),
    ];
    for (name, build) in cases {
        let mut params = ParamSet::new();
        let mut data = rand_tensor(&[5], &mut rng);
        if name == "relu" {
            for v in data.data_mut() {
                if v.abs() < 0.2 {
                    *v += 0.4; // keep clear of the kink
                }
            }
        }
        let x = params.add("x", data);
        check_gradients(
            &mut params,
            &|_, tape| {
                let xn = tape.param(x);
                let y = build(tape, xn);
                if tape.node_len(y) == 1 {
                    return tape.sum_all(y);
                }
                let w = tape.constant(rand_tensor_static(tape.node_len(y)));
                let wy = tape.hadamard(y, w);
                tape.sum_all(wy)
            },
            TOL,
            name,
        );
    }
}

/// Fixed weighting vector so losses depend on every output element.
fn rand_tensor_static(n: usize) -> Tensor {
    let data: Vec<f32> = (0..n).map(|i| 0.3 + 0.17 * (i as f32) % 1.1).collect();
    Tensor::vector(data)
}

#[test]
fn binary_and_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // matmul in its three rank combinations
    for (sa, sb) in [
        (vec![3usize, 4], vec![4usize, 2]),
        (vec![3, 4], vec![4]),
        (vec![4], vec![4, 2]),
    ] {
        let mut params = ParamSet::new();
        let a = params.add("a", rand_tensor(&sa, &mut rng));
        let b = params.add("b", rand_tensor(&sb, &mut rng));
        check_gradients(
            &mut params,
            &|_, tape| {
                let an = tape.param(a);
                let bn = tape.param(b);
                let y = tape.matmul(an, bn);
                let flat = tape.sum_all(y);
                tape.hadamard(flat, flat)
            },
            TOL,
            "matmul",
        );
    }

    let mut params = ParamSet::new();
    let a = params.add("a", rand_tensor(&[4], &mut rng));
    let b = params.add("b", rand_tensor(&[4], &mut rng));
    let m = params.add("m", rand_tensor(&[3, 4], &mut rng));
    check_gradients(
        &mut params,
        &|_, tape| {
            let an = tape.param(a);
            let bn = tape.param(b);
            let mn = tape.param(m);
            let sum = tape.add(an, bn);
            let diff = tape.sub(an, bn);
            let had = tape.hadamard(sum, diff);
            let dot = tape.dot(had, an);
            let biased = tape.add_bias(mn, bn);
            let mt = tape.transpose(biased);
            let rows = tape.rows(mt, &[1, 3]).unwrap();
            let all = tape.sum_all(rows);
            let cat = tape.concat(had, an);
            let cs = tape.sum_all(cat);
            let st = tape.stack(&[an, bn, had]);
            let ss = tape.sum_all(st);
            let partial = tape.add(dot, all);
            let partial = tape.add(partial, cs);
            tape.add(partial, ss)
        },
        TOL,
        "binary/structural",
    );
}

#[test]
fn loss_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamSet::new();
    let y = params.add("y", rand_tensor(&[4], &mut rng));
    check_gradients(
        &mut params,
        &|_, tape| {
            let yn = tape.param(y);
            tape.l2_loss(yn, Tensor::vector(vec![0.5, -0.5, 1.0, 0.0]))
                .unwrap()
        },
        TOL,
        "l2_loss",
    );

    let mut params = ParamSet::new();
    let s = params.add("s", rand_tensor(&[5], &mut rng));
    check_gradients(
        &mut params,
        &|_, tape| {
            let sn = tape.param(s);
            let p = tape.softmax(sn);
            tape.nll_loss(p, 3).unwrap()
        },
        TOL,
        "nll after softmax",
    );
}

#[test]
fn layer_norm_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // vector and row-wise forms
    for shape in [vec![6usize], vec![3usize, 5]] {
        let width = *shape.last().unwrap();
        let mut params = ParamSet::new();
        let x = params.add("x", rand_tensor(&shape, &mut rng));
        let g = params.add("g", rand_tensor(&[width], &mut rng));
        let b = params.add("b", rand_tensor(&[width], &mut rng));
        check_gradients(
            &mut params,
            &|_, tape| {
                let xn = tape.param(x);
                let gn = tape.param(g);
                let bn = tape.param(b);
                let y = tape.layer_norm(xn, gn, bn);
                let sq = tape.hadamard(y, y);
                tape.sum_all(sq)
            },
            TOL,
            "layer_norm",
        );
    }
}

#[test]
fn dropout_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParamSet::new();
    let x = params.add("x", rand_tensor(&[6], &mut rng));
    let mask = vec![0.0, 2.0, 2.0, 0.0, 2.0, 2.0];
    check_gradients(
        &mut params,
        &|_, tape| {
            let xn = tape.param(x);
            let d = tape.dropout(xn, mask.clone());
            let sq = tape.hadamard(d, d);
            tape.sum_all(sq)
        },
        TOL,
        "dropout",
    );
}

/// Every composite graph of depth <= 4 over the core op set, checked
/// against finite differences on random instances.
#[test]
fn random_composites() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..30 {
        let depth = 1 + (case % 4);
        let mut params = ParamSet::new();
        let x = params.add("x", rand_tensor(&[4], &mut rng));
        let w: Vec<_> = (0..depth)
            .map(|i| params.add(format!("w{i}"), rand_tensor(&[4, 4], &mut rng)))
            .collect();
        let g = params.add("g", rand_tensor(&[4], &mut rng));
        let b = params.add("b", rand_tensor(&[4], &mut rng));
        let ops: Vec<usize> = (0..depth).map(|_| rng.gen_range(0..6)).collect();
        check_gradients(
            &mut params,
            &|_, tape| {
                let mut h = tape.param(x);
                for (i, &op) in ops.iter().enumerate() {
                    let wn = tape.param(w[i]);
                    let lin = tape.matmul(wn, h);
                    h = match op {
                        0 => tape.sigmoid(lin),
                        1 => tape.tanh(lin),
                        2 => {
                            // keep relu inputs off the kink by shifting
                            let s = tape.add_scalar(lin, 0.7);
                            tape.relu(s)
                        }
                        3 => tape.softmax(lin),
                        4 => {
                            let gn = tape.param(g);
                            let bn = tape.param(b);
                            tape.layer_norm(lin, gn, bn)
                        }
                        _ => {
                            let bn = tape.param(b);
                            tape.add(lin, bn)
                        }
                    };
                }
                let weight = tape.constant(rand_tensor_static(4));
                let wy = tape.hadamard(h, weight);
                tape.sum_all(wy)
            },
            TOL,
            &format!("composite case {case} ops {ops:?}"),
        );
    }
}

#[test]
fn recurrent_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // vanilla cell
    let mut params = ParamSet::new();
    let x = params.add("x", rand_tensor(&[3], &mut rng));
    let h0 = params.add("h0", rand_tensor(&[2], &mut rng));
    let cell = RnnCell::new("cell", 3, 2, &mut params, &mut rng);
    check_gradients(
        &mut params,
        &|_, tape| {
            let xn = tape.param(x);
            let hn = tape.param(h0);
            let h1 = cell.step(tape, xn, hn);
            let sq = tape.hadamard(h1, h1);
            tape.sum_all(sq)
        },
        TOL,
        "rnn cell",
    );

    // LSTM: parameters, inputs, and both states
    let mut params = ParamSet::new();
    let x = params.add("x", rand_tensor(&[3], &mut rng));
    let h0 = params.add("h0", rand_tensor(&[2], &mut rng));
    let m0 = params.add("m0", rand_tensor(&[2], &mut rng));
    let cell = LstmCell::new("cell", 3, 2, &mut params, &mut rng);
    check_gradients(
        &mut params,
        &|_, tape| {
            let xn = tape.param(x);
            let hn = tape.param(h0);
            let mn = tape.param(m0);
            let (h1, m1) = cell.step(tape, xn, hn, mn);
            let hs = tape.hadamard(h1, h1);
            let ms = tape.hadamard(m1, m1);
            let a = tape.sum_all(hs);
            let b = tape.sum_all(ms);
            tape.add(a, b)
        },
        TOL,
        "lstm cell",
    );

    // GRU, both bias conventions
    for mode in [GruBias::AfterInterpolation, GruBias::InsideCombination] {
        let mut params = ParamSet::new();
        let x = params.add("x", rand_tensor(&[3], &mut rng));
        let s0 = params.add("s0", rand_tensor(&[2], &mut rng));
        let cell = GruCell::new("cell", 3, 2, mode, &mut params, &mut rng);
        check_gradients(
            &mut params,
            &|_, tape| {
                let xn = tape.param(x);
                let sn = tape.param(s0);
                let s1 = cell.step(tape, xn, sn);
                let sq = tape.hadamard(s1, s1);
                tape.sum_all(sq)
            },
            TOL,
            &format!("gru cell {mode:?}"),
        );
    }
}

#[test]
fn attention_and_coverage_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for coverage in [false, true] {
        let mut params = ParamSet::new();
        let s = params.add("s", rand_tensor(&[3], &mut rng));
        let hs: Vec<_> = (0..3)
            .map(|i| params.add(format!("h{i}"), rand_tensor(&[4], &mut rng)))
            .collect();
        let att = AttentionParams::new("att", 3, 4, coverage, &mut params, &mut rng);
        if let Some(v) = att.v_cov {
            *params.value_mut(v) = Tensor::vector(vec![0.8]);
        }
        check_gradients(
            &mut params,
            &|_, tape| {
                let sn = tape.param(s);
                let ann: Vec<_> = hs.iter().map(|&h| tape.param(h)).collect();
                let cov_nodes: Option<Vec<_>> = coverage.then(|| {
                    (0..3)
                        .map(|i| tape.constant(Tensor::scalar(0.4 * i as f32)))
                        .collect()
                });
                let (alpha, ctx) = att
                    .attend(tape, sn, &ann, None, cov_nodes.as_deref())
                    .unwrap();
                let asq = tape.hadamard(alpha, alpha);
                let csq = tape.hadamard(ctx, ctx);
                let a = tape.sum_all(asq);
                let c = tape.sum_all(csq);
                tape.add(a, c)
            },
            TOL,
            &format!("attention coverage={coverage}"),
        );
    }
}

#[test]
fn self_attention_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = ParamSet::new();
    let h = params.add("h", rand_tensor(&[3, 4], &mut rng));
    let layer = SelfAttentionLayer::new("sa", 4, &mut params, &mut rng);
    check_gradients(
        &mut params,
        &|_, tape| {
            let hn = tape.param(h);
            let out = layer.apply(tape, hn, false);
            let sq = tape.hadamard(out, out);
            tape.sum_all(sq)
        },
        TOL,
        "self-attention layer",
    );

    // causal self-attention plus cross attention
    let mut params = ParamSet::new();
    let s = params.add("s", rand_tensor(&[2, 4], &mut rng));
    let h = params.add("h", rand_tensor(&[3, 4], &mut rng));
    check_gradients(
        &mut params,
        &|_, tape| {
            let sn = tape.param(s);
            let hn = tape.param(h);
            let (sa, _) = seq2seq::self_attention(tape, sn, true);
            let (ctx, alpha) = transformer_cross_attention(tape, sa, hn);
            let csq = tape.hadamard(ctx, ctx);
            let asq = tape.hadamard(alpha, alpha);
            let a = tape.sum_all(csq);
            let b = tape.sum_all(asq);
            tape.add(a, b)
        },
        TOL,
        "causal + cross attention",
    );
}

#[test]
fn objective_compositions() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    // self-normalizing loss
    let mut params = ParamSet::new();
    let s = params.add("s", rand_tensor(&[6], &mut rng));
    check_gradients(
        &mut params,
        &|_, tape| {
            let sn = tape.param(s);
            let probs = tape.softmax(sn);
            selfnorm_loss(tape, Prediction { scores: sn, probs }, 2, 0.3).unwrap()
        },
        TOL,
        "selfnorm loss",
    );

    // noise-contrastive loss, true and noise sides
    for is_true in [true, false] {
        let mut params = ParamSet::new();
        let s = params.add("s", rand_tensor(&[1], &mut rng));
        check_gradients(
            &mut params,
            &|_, tape| {
                let sn = tape.param(s);
                nce_loss(tape, sn, 0.07, is_true)
            },
            TOL,
            &format!("nce loss true={is_true}"),
        );
    }

    // guided alignment, both modes
    let a = Tensor::matrix(&[vec![0.6, 0.4, 0.0], vec![0.1, 0.2, 0.7]]);
    for mode in [AlignMode::CrossEntropy, AlignMode::MeanSquared] {
        let mut params = ParamSet::new();
        let s = params.add("s", rand_tensor(&[2, 3], &mut rng));
        let a = a.clone();
        check_gradients(
            &mut params,
            &|_, tape| {
                let sn = tape.param(s);
                let alphas = tape.softmax(sn);
                guided_alignment_cost(tape, &a, alphas, mode).unwrap()
            },
            TOL,
            &format!("guided alignment {mode:?}"),
        );
    }
}
