//! The classic two-layer XOR network, three ways: inference with the
//! worked-example weights, one hand-checked backprop step, and training
//! from random initializations.

use nmt::graph::{Bindings, ParamSet, Tape};
use nmt::layers::{init_weights, LayerKind};
use nmt::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds the network loss for one example on a fresh tape; the bias units
/// are folded in as a third input fixed to 1.
struct XorNet {
    params: ParamSet,
    w1: nmt::graph::ParamId,
    w2: nmt::graph::ParamId,
}

impl XorNet {
    fn reference() -> XorNet {
        let mut params = ParamSet::new();
        let w1 = params.add(
            "w1",
            Tensor::matrix(&[vec![3.0, 4.0, -2.0], vec![2.0, 3.0, -4.0]]),
        );
        let w2 = params.add("w2", Tensor::matrix(&[vec![5.0, -5.0, -2.0]]));
        XorNet { params, w1, w2 }
    }

    fn random(rng: &mut ChaCha8Rng) -> XorNet {
        let mut params = ParamSet::new();
        let w1 = params.add("w1", init_weights(&[2, 3], LayerKind::Hidden, rng));
        let w2 = params.add("w2", init_weights(&[1, 3], LayerKind::Output, rng));
        XorNet { params, w1, w2 }
    }

    /// Output and hidden values for one input pair.
    fn infer(&self, x0: f32, x1: f32) -> (f32, Vec<f32>) {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(Tensor::vector(vec![x0, x1, 1.0]));
        let w1 = tape.param(self.w1);
        let z = tape.matmul(w1, x);
        let h = tape.sigmoid(z);
        let one = tape.constant(Tensor::vector(vec![1.0]));
        let h_aug = tape.concat(h, one);
        let w2 = tape.param(self.w2);
        let s = tape.matmul(w2, h_aug);
        let y = tape.sigmoid(s);
        tape.forward(&Bindings::new()).unwrap();
        (tape.value(y).item(), tape.value(h).data().to_vec())
    }

    /// One online epoch: each of the four patterns is processed one at a
    /// time with an immediate update. Returns the summed loss.
    fn train_epoch(&mut self, lr: f32) -> f32 {
        let mut total = 0.0;
        for (x0, x1, t) in [(0., 0., 0.), (0., 1., 1.), (1., 0., 1.), (1., 1., 0.)] {
            let mut tape = Tape::new(&self.params);
            let x = tape.constant(Tensor::vector(vec![x0, x1, 1.0]));
            let w1 = tape.param(self.w1);
            let z = tape.matmul(w1, x);
            let h = tape.sigmoid(z);
            let one = tape.constant(Tensor::vector(vec![1.0]));
            let h_aug = tape.concat(h, one);
            let w2 = tape.param(self.w2);
            let s = tape.matmul(w2, h_aug);
            let y = tape.sigmoid(s);
            let loss = tape.l2_loss(y, Tensor::scalar(t)).unwrap();
            tape.forward(&Bindings::new()).unwrap();
            total += tape.value(loss).item();
            let grads = tape.backward(loss).unwrap();
            for (id, g) in grads.iter() {
                nmt::optim::sgd_step(self.params.value_mut(id), g, lr);
            }
        }
        total
    }

    fn all_correct(&self) -> bool {
        [(0., 0., 0.), (0., 1., 1.), (1., 0., 1.), (1., 1., 0.)]
            .iter()
            .all(|&(x0, x1, t)| {
                let (y, _) = self.infer(x0, x1);
                (y > 0.5) == (t > 0.5)
            })
    }
}

fn main() {
    println!("== inference with the worked-example weights ==");
    let net = XorNet::reference();
    for (x0, x1) in [(0., 0.), (0., 1.), (1., 0.), (1., 1.)] {
        let (y, h) = net.infer(x0, x1);
        println!(
            "({x0},{x1}) -> hidden ({:.3}, {:.3})  output {y:.3}  -> {}",
            h[0],
            h[1],
            if y > 0.5 { 1 } else { 0 }
        );
    }

    println!("\n== one backprop step for (1,0) -> 1 ==");
    let net = XorNet::reference();
    let mut tape = Tape::new(&net.params);
    let x = tape.constant(Tensor::vector(vec![1.0, 0.0, 1.0]));
    let w1 = tape.param(net.w1);
    let z = tape.matmul(w1, x);
    let h = tape.sigmoid(z);
    let one = tape.constant(Tensor::vector(vec![1.0]));
    let h_aug = tape.concat(h, one);
    let w2 = tape.param(net.w2);
    let s = tape.matmul(w2, h_aug);
    let y = tape.sigmoid(s);
    let loss = tape.l2_loss(y, Tensor::scalar(1.0)).unwrap();
    tape.forward(&Bindings::new()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g2 = grads.get(net.w2).unwrap();
    let g1 = grads.get(net.w1).unwrap();
    println!("loss                   {:.4}", tape.value(loss).item());
    println!(
        "descent deltas W2      [{:.3} {:.4} {:.3}]",
        -g2.data()[0],
        -g2.data()[1],
        -g2.data()[2]
    );
    println!(
        "descent deltas W1 row0 [{:.3} {:.3} {:.3}]",
        -g1.at(0, 0),
        -g1.at(0, 1),
        -g1.at(0, 2)
    );
    println!(
        "descent deltas W1 row1 [{:.3} {:.3} {:.3}]",
        -g1.at(1, 0),
        -g1.at(1, 1),
        -g1.at(1, 2)
    );

    println!("\n== training from random initializations ==");
    let mut solved = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = XorNet::random(&mut rng);
        let mut epochs_used = None;
        for epoch in 1..=10_000 {
            net.train_epoch(0.1);
            if epoch % 50 == 0 && net.all_correct() {
                epochs_used = Some(epoch);
                break;
            }
        }
        match epochs_used {
            Some(e) => {
                solved += 1;
                println!("seed {seed}: solved after {e} epochs");
            }
            None => println!("seed {seed}: not solved within 10000 epochs"),
        }
    }
    println!("{solved}/10 seeds reach the correct truth table");
}
