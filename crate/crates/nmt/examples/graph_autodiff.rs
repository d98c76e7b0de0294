//! Builds a small computation graph by hand, runs the forward and backward
//! passes, and cross-checks every gradient against central finite
//! differences.

use nmt::graph::{Bindings, ParamSet, Tape};
use nmt::tensor::Tensor;

fn loss_value(params: &ParamSet) -> f64 {
    let mut tape = Tape::new(params);
    let loss = build_loss(params, &mut tape);
    tape.forward(&Bindings::new()).unwrap();
    tape.value(loss).item() as f64
}

/// loss = L2(sigmoid(W2 * sigmoid(W1 x + b1) + b2), t)
fn build_loss(params: &ParamSet, tape: &mut Tape) -> nmt::graph::NodeId {
    let w1 = tape.param(params.by_name("w1").unwrap());
    let b1 = tape.param(params.by_name("b1").unwrap());
    let w2 = tape.param(params.by_name("w2").unwrap());
    let b2 = tape.param(params.by_name("b2").unwrap());
    let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    let prod1 = tape.matmul(w1, x);
    let sum1 = tape.add(prod1, b1);
    let sig1 = tape.sigmoid(sum1);
    let prod2 = tape.matmul(w2, sig1);
    let sum2 = tape.add(prod2, b2);
    let sig2 = tape.sigmoid(sum2);
    tape.l2_loss(sig2, Tensor::scalar(1.0)).unwrap()
}

fn main() {
    let mut params = ParamSet::new();
    params.add("w1", Tensor::matrix(&[vec![3.0, 4.0], vec![2.0, 3.0]]));
    params.add("b1", Tensor::vector(vec![-2.0, -4.0]));
    params.add("w2", Tensor::matrix(&[vec![5.0, -5.0]]));
    params.add("b2", Tensor::vector(vec![-2.0]));

    // forward and backward
    let mut tape = Tape::new(&params);
    let loss = build_loss(&params, &mut tape);
    tape.forward(&Bindings::new()).unwrap();
    println!("loss  {:.4}", tape.value(loss).item());
    let grads = tape.backward(loss).unwrap();
    for (id, g) in grads.iter() {
        println!("dL/d{:<3} {:?}", params.get(id).name, g.data());
    }

    // finite-difference cross-check, every parameter element
    println!("\nfinite-difference check (h = 1e-3):");
    let h = 1e-3f32;
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let len = params.value(id).len();
        for i in 0..len {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + h;
            let plus = loss_value(&params);
            params.value_mut(id).data_mut()[i] = orig - h;
            let minus = loss_value(&params);
            params.value_mut(id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h as f64);
            let analytic = grads.get(id).unwrap().data()[i] as f64;
            worst = worst.max((fd - analytic).abs());
        }
    }
    println!("max |analytic - numeric| = {worst:.2e}");
    assert!(worst < 1e-3);
    println!("gradients verified");
}
