//! Shared test helpers: the central-finite-difference gradient oracle.

use nmt::graph::{Bindings, NodeId, ParamSet, Tape};

/// Builds a loss node on the given tape. Called repeatedly with perturbed
/// parameters, so it must be deterministic.
pub type LossBuilder<'a> = dyn Fn(&ParamSet, &mut Tape) -> NodeId + 'a;

fn loss_value(params: &ParamSet, build: &LossBuilder) -> f64 {
    let mut tape = Tape::new(params);
    let loss = build(params, &mut tape);
    tape.forward(&Bindings::new()).expect("forward");
    tape.value(loss).item() as f64
}

/// Checks every element of every parameter against central finite
/// differences. The relative error uses a unit floor in the denominator, so
/// small gradients are held to the same absolute tolerance.
pub fn check_gradients(params: &mut ParamSet, build: &LossBuilder, tol: f64, what: &str) {
    let h = 5e-3f32;
    // analytic gradients
    let grads = {
        let mut tape = Tape::new(params);
        let loss = build(params, &mut tape);
        tape.forward(&Bindings::new()).expect("forward");
        tape.backward(loss).expect("backward")
    };

    let ids: Vec<nmt::graph::ParamId> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = params.get(id).name.clone();
        let len = params.value(id).len();
        for i in 0..len {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + h;
            let plus = loss_value(params, build);
            params.value_mut(id).data_mut()[i] = orig - h;
            let minus = loss_value(params, build);
            params.value_mut(id).data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * h as f64);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i] as f64);
            let denom = fd.abs().max(analytic.abs()).max(1.0);
            let rel = (fd - analytic).abs() / denom;
            assert!(
                rel < tol,
                "{what}: {name}[{i}]: analytic {analytic:.6} vs fd {fd:.6} (rel {rel:.2e})"
            );
        }
    }
}
