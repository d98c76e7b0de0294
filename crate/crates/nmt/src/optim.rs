//! Parameter-update rules: plain SGD, momentum, Adagrad, Adam, and global
//! gradient clipping.

use crate::graph::{GradStore, ParamSet};
use crate::tensor::Tensor;

pub const DEFAULT_SGD_LR: f32 = 0.1;
pub const DEFAULT_ADAM_LR: f32 = 0.001;
pub const DEFAULT_MOMENTUM_DECAY: f32 = 0.9;
pub const DEFAULT_BETA1: f32 = 0.9;
pub const DEFAULT_BETA2: f32 = 0.999;
pub const DEFAULT_EPS: f32 = 1e-8;
pub const DEFAULT_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adagrad,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<OptimizerKind> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "momentum" => Some(OptimizerKind::Momentum),
            "adagrad" => Some(OptimizerKind::Adagrad),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }

    pub fn default_lr(self) -> f32 {
        match self {
            OptimizerKind::Adam => DEFAULT_ADAM_LR,
            _ => DEFAULT_SGD_LR,
        }
    }
}

/// Hyperparameters shared by all update rules.
#[derive(Debug, Clone, Copy)]
pub struct Hyper {
    pub lr: f32,
    pub momentum_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Hyper {
        Hyper {
            lr: DEFAULT_SGD_LR,
            momentum_decay: DEFAULT_MOMENTUM_DECAY,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            clip: Some(DEFAULT_CLIP),
        }
    }
}

/// w <- w - lr * g
pub fn sgd_step(w: &mut Tensor, g: &Tensor, lr: f32) {
    assert_eq!(w.shape(), g.shape(), "sgd_step shape mismatch");
    for (w, &g) in w.data_mut().iter_mut().zip(g.data()) {
        *w -= lr * g;
    }
}

/// m <- decay * m + g; w <- w - lr * m
pub fn momentum_step(m: &mut Tensor, w: &mut Tensor, g: &Tensor, lr: f32, decay: f32) {
    assert!((0.0..1.0).contains(&decay));
    for ((m, w), &g) in m.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
        *m = decay * *m + g;
        *w -= lr * *m;
    }
}

/// v <- v + g^2; w <- w - lr * g / (sqrt(v) + eps)
pub fn adagrad_step(v: &mut Tensor, w: &mut Tensor, g: &Tensor, lr: f32, eps: f32) {
    for ((v, w), &g) in v.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
        *v += g * g;
        *w -= lr * g / (v.sqrt() + eps);
    }
}

/// One Adam step with bias correction; `t` is the step count after the
/// increment (first call passes t = 1).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    w: &mut Tensor,
    g: &Tensor,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) {
    let bc1 = 1.0 - (beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (beta2 as f64).powi(t as i32);
    for (((m, v), w), &g) in m
        .data_mut()
        .iter_mut()
        .zip(v.data_mut())
        .zip(w.data_mut())
        .zip(g.data())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m as f64 / bc1;
        let v_hat = *v as f64 / bc2;
        *w -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
    }
}

/// Rescales all gradients so the global L2 norm does not exceed `tau`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut GradStore, tau: f64) -> f64 {
    assert!(tau > 0.0);
    let norm = grads.global_norm();
    if norm > tau {
        grads.scale((tau / norm) as f32);
    }
    norm
}

#[derive(Debug, Clone, Default)]
struct Slot {
    m: Option<Tensor>,
    v: Option<Tensor>,
    t: u64,
}

/// Owns per-parameter optimizer state and applies one of the update rules to
/// a whole [`ParamSet`]. Gradient reduction across worker tapes happens
/// before [`Optimizer::step`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub hyper: Hyper,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, hyper: Hyper, param_count: usize) -> Optimizer {
        Optimizer {
            kind,
            hyper,
            slots: vec![Slot::default(); param_count],
        }
    }

    /// Per-parameter (momentum, accumulator, step count) state, for
    /// checkpointing.
    pub fn export_slots(&self) -> Vec<(Option<Tensor>, Option<Tensor>, u64)> {
        self.slots
            .iter()
            .map(|s| (s.m.clone(), s.v.clone(), s.t))
            .collect()
    }

    pub fn import_slots(&mut self, slots: Vec<(Option<Tensor>, Option<Tensor>, u64)>) {
        assert_eq!(slots.len(), self.slots.len(), "optimizer state size mismatch");
        for (slot, (m, v, t)) in self.slots.iter_mut().zip(slots) {
            slot.m = m;
            slot.v = v;
            slot.t = t;
        }
    }

    /// Clips (when configured) and applies gradients to every trainable
    /// parameter that has one.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut GradStore) {
        if let Some(tau) = self.hyper.clip {
            clip_gradients(grads, tau);
        }
        for i in 0..params.len() {
            let id = crate::graph::ParamId(i);
            if !params.get(id).trainable {
                continue;
            }
            let g = match grads.get(id) {
                Some(g) => g.clone(),
                None => continue,
            };
            let w = params.value_mut(id);
            let slot = &mut self.slots[i];
            slot.t += 1;
            match self.kind {
                OptimizerKind::Sgd => sgd_step(w, &g, self.hyper.lr),
                OptimizerKind::Momentum => {
                    let m = slot.m.get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
                    momentum_step(m, w, &g, self.hyper.lr, self.hyper.momentum_decay);
                }
                OptimizerKind::Adagrad => {
                    let v = slot.v.get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
                    adagrad_step(v, w, &g, self.hyper.lr, self.hyper.eps);
                }
                OptimizerKind::Adam => {
                    let m = slot.m.get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
                    let v = slot.v.get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
                    adam_step(
                        m,
                        v,
                        slot.t,
                        w,
                        &g,
                        self.hyper.lr,
                        self.hyper.beta1,
                        self.hyper.beta2,
                        self.hyper.eps,
                    );
                }
            }
        }
    }
}
