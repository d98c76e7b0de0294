//! Parameterized building blocks recorded onto the tape: embeddings,
//! feed-forward layers, recurrent cells, dropout, and weight initialization.

use rand::Rng;

use crate::error::Result;
use crate::graph::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::{Activation, Tensor};

/// Which initialization range a weight matrix gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Uniform in [-sqrt(6)/sqrt(n_in + n_out), +sqrt(6)/sqrt(n_in + n_out)].
    Hidden,
    /// Uniform in [-1/sqrt(n_in), 1/sqrt(n_in)].
    Output,
}

/// Random weight initialization. Matrices are [out, in]; the fan sizes are
/// read off the shape. Vectors (biases) are zero-initialized.
pub fn init_weights(shape: &[usize], kind: LayerKind, rng: &mut impl Rng) -> Tensor {
    if shape.len() == 1 {
        return Tensor::zeros(shape.to_vec());
    }
    let (out, inp) = (shape[0], shape[1]);
    let bound = match kind {
        LayerKind::Output => 1.0 / (inp as f64).sqrt(),
        LayerKind::Hidden => 6.0f64.sqrt() / ((inp + out) as f64).sqrt(),
    };
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-bound..=bound) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Word embedding lookup table, one row per vocabulary entry.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        name: &str,
        vocab: usize,
        dim: usize,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Embedding {
        let table = params.add(name, init_weights(&[vocab, dim], LayerKind::Output, rng));
        Embedding { table, vocab, dim }
    }

    /// Row select; equal to multiplying the table with a one-hot vector.
    pub fn embed(&self, tape: &mut Tape, id: usize) -> Result<NodeId> {
        let t = tape.param(self.table);
        tape.rows(t, &[id])
    }

    pub fn embed_seq(&self, tape: &mut Tape, ids: &[usize]) -> Result<Vec<NodeId>> {
        ids.iter().map(|&id| self.embed(tape, id)).collect()
    }
}

/// Sum of per-factor embeddings; all factors must share the output width.
pub fn embed_factored(
    tape: &mut Tape,
    factors: &[&Embedding],
    ids: &[usize],
) -> Result<NodeId> {
    assert!(!factors.is_empty());
    if factors.len() != ids.len() {
        return Err(crate::error::Error::Data(format!(
            "{} factor embeddings but {} factor ids",
            factors.len(),
            ids.len()
        )));
    }
    let mut acc = factors[0].embed(tape, ids[0])?;
    for (f, &id) in factors.iter().zip(ids).skip(1) {
        assert_eq!(f.dim, factors[0].dim, "factor widths differ");
        let e = f.embed(tape, id)?;
        acc = tape.add(acc, e);
    }
    Ok(acc)
}

/// Fully connected layer: activation(W x + b).
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w: ParamId,
    pub b: ParamId,
    pub activation: Option<Activation>,
}

impl FeedForward {
    pub fn new(
        prefix: &str,
        input: usize,
        output: usize,
        activation: Option<Activation>,
        kind: LayerKind,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> FeedForward {
        let w = params.add(
            format!("{prefix}.w"),
            init_weights(&[output, input], kind, rng),
        );
        let b = params.add(format!("{prefix}.b"), Tensor::zeros(vec![output]));
        FeedForward { w, b, activation }
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let s = tape.matmul(w, x);
        let s = tape.add(s, b);
        match self.activation {
            Some(a) => tape.activation(a, s),
            None => s,
        }
    }

    /// Applies the layer to every row of a matrix.
    pub fn apply_rows(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let w = tape.param(self.w);
        let wt = tape.transpose(w);
        let b = tape.param(self.b);
        let s = tape.matmul(x, wt);
        let s = tape.add_bias(s, b);
        match self.activation {
            Some(a) => tape.activation(a, s),
            None => s,
        }
    }
}

/// State threaded through a recurrent cell: hidden vector plus, for LSTM,
/// the memory vector.
#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: NodeId,
    pub m: Option<NodeId>,
}

/// Plain recurrent cell: h_t = tanh(W x + U h_prev + b).
#[derive(Debug, Clone)]
pub struct RnnCell {
    w: ParamId,
    u: ParamId,
    b: ParamId,
    dim: usize,
}

impl RnnCell {
    pub fn new(
        prefix: &str,
        input: usize,
        dim: usize,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> RnnCell {
        RnnCell {
            w: params.add(
                format!("{prefix}.w"),
                init_weights(&[dim, input], LayerKind::Hidden, rng),
            ),
            u: params.add(
                format!("{prefix}.u"),
                init_weights(&[dim, dim], LayerKind::Hidden, rng),
            ),
            b: params.add(format!("{prefix}.b"), Tensor::zeros(vec![dim])),
            dim,
        }
    }

    pub fn step(&self, tape: &mut Tape, x: NodeId, h_prev: NodeId) -> NodeId {
        let w = tape.param(self.w);
        let u = tape.param(self.u);
        let b = tape.param(self.b);
        let wx = tape.matmul(w, x);
        let uh = tape.matmul(u, h_prev);
        let s = tape.add(wx, uh);
        let s = tape.add(s, b);
        tape.tanh(s)
    }
}

/// LSTM cell with an explicit memory state and input, forget, and output
/// gates. Gate activations are sigmoid; the input combination and the output
/// both pass through tanh.
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_x: ParamId,
    w_h: ParamId,
    /// [x-weights, h-weights, memory-weights] for input, forget, output gates.
    gates: [[ParamId; 3]; 3],
    dim: usize,
}

const GATE_NAMES: [&str; 3] = ["input", "forget", "output"];

impl LstmCell {
    pub fn new(
        prefix: &str,
        input: usize,
        dim: usize,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> LstmCell {
        let mut weight = |name: String, shape: [usize; 2]| {
            params.add(name, init_weights(&shape, LayerKind::Hidden, rng))
        };
        let w_x = weight(format!("{prefix}.w_x"), [dim, input]);
        let w_h = weight(format!("{prefix}.w_h"), [dim, dim]);
        let gates = GATE_NAMES.map(|g| {
            [
                weight(format!("{prefix}.{g}.w_x"), [dim, input]),
                weight(format!("{prefix}.{g}.w_h"), [dim, dim]),
                weight(format!("{prefix}.{g}.w_m"), [dim, dim]),
            ]
        });
        LstmCell {
            w_x,
            w_h,
            gates,
            dim,
        }
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        x: NodeId,
        h_prev: NodeId,
        m_prev: NodeId,
    ) -> (NodeId, NodeId) {
        // input combination
        let w_x = tape.param(self.w_x);
        let w_h = tape.param(self.w_h);
        let wx = tape.matmul(w_x, x);
        let wh = tape.matmul(w_h, h_prev);
        let pre = tape.add(wx, wh);
        let input = tape.tanh(pre);

        let gate = |tape: &mut Tape, idx: usize| {
            let [wxa, wha, wma] = self.gates[idx];
            let wxa = tape.param(wxa);
            let wha = tape.param(wha);
            let wma = tape.param(wma);
            let a = tape.matmul(wxa, x);
            let b = tape.matmul(wha, h_prev);
            let c = tape.matmul(wma, m_prev);
            let s = tape.add(a, b);
            let s = tape.add(s, c);
            tape.sigmoid(s)
        };
        let g_input = gate(tape, 0);
        let g_forget = gate(tape, 1);
        let g_output = gate(tape, 2);

        let gated_in = tape.hadamard(g_input, input);
        let kept = tape.hadamard(g_forget, m_prev);
        let m_t = tape.add(gated_in, kept);
        let out = tape.hadamard(g_output, m_t);
        let h_t = tape.tanh(out);
        (h_t, m_t)
    }
}

/// Where the GRU's trailing bias enters the state update. The cited equation
/// adds it after the update-gate interpolation; folding it into the
/// combination is the conventional alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GruBias {
    #[default]
    AfterInterpolation,
    InsideCombination,
}

/// Gated recurrent unit: no separate memory, two gates.
#[derive(Debug, Clone)]
pub struct GruCell {
    w_update: ParamId,
    u_update: ParamId,
    b_update: ParamId,
    w_reset: ParamId,
    u_reset: ParamId,
    b_reset: ParamId,
    w: ParamId,
    u: ParamId,
    bias: ParamId,
    bias_mode: GruBias,
    dim: usize,
}

impl GruCell {
    pub fn new(
        prefix: &str,
        input: usize,
        dim: usize,
        bias_mode: GruBias,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> GruCell {
        let mut weight = |name: String, shape: [usize; 2]| {
            params.add(name, init_weights(&shape, LayerKind::Hidden, rng))
        };
        let w_update = weight(format!("{prefix}.update.w"), [dim, input]);
        let u_update = weight(format!("{prefix}.update.u"), [dim, dim]);
        let w_reset = weight(format!("{prefix}.reset.w"), [dim, input]);
        let u_reset = weight(format!("{prefix}.reset.u"), [dim, dim]);
        let w = weight(format!("{prefix}.w"), [dim, input]);
        let u = weight(format!("{prefix}.u"), [dim, dim]);
        GruCell {
            w_update,
            u_update,
            b_update: params.add(format!("{prefix}.update.b"), Tensor::zeros(vec![dim])),
            w_reset,
            u_reset,
            b_reset: params.add(format!("{prefix}.reset.b"), Tensor::zeros(vec![dim])),
            w,
            u,
            bias: params.add(format!("{prefix}.b"), Tensor::zeros(vec![dim])),
            bias_mode,
            dim,
        }
    }

    pub fn step(&self, tape: &mut Tape, x: NodeId, s_prev: NodeId) -> NodeId {
        let gate = |tape: &mut Tape, w, u, b| {
            let w = tape.param(w);
            let u = tape.param(u);
            let b = tape.param(b);
            let wx = tape.matmul(w, x);
            let us = tape.matmul(u, s_prev);
            let s = tape.add(wx, us);
            let s = tape.add(s, b);
            tape.sigmoid(s)
        };
        let update = gate(tape, self.w_update, self.u_update, self.b_update);
        let reset = gate(tape, self.w_reset, self.u_reset, self.b_reset);

        let w = tape.param(self.w);
        let u = tape.param(self.u);
        let bias = tape.param(self.bias);
        let wx = tape.matmul(w, x);
        let gated_prev = tape.hadamard(reset, s_prev);
        let us = tape.matmul(u, gated_prev);
        let mut pre = tape.add(wx, us);
        if self.bias_mode == GruBias::InsideCombination {
            pre = tape.add(pre, bias);
        }
        let combination = tape.tanh(pre);

        // state_t = (1 - update) o s_prev + update o combination
        let neg_update = tape.neg(update);
        let one_minus = tape.add_scalar(neg_update, 1.0);
        let keep = tape.hadamard(one_minus, s_prev);
        let new = tape.hadamard(update, combination);
        let interp = tape.add(keep, new);
        match self.bias_mode {
            GruBias::AfterInterpolation => tape.add(interp, bias),
            GruBias::InsideCombination => interp,
        }
    }
}

/// Which recurrent cell a model uses; encoder and decoder share the choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Rnn,
    Lstm,
    Gru,
}

/// A recurrent cell of a configured kind, exposing a uniform step interface.
#[derive(Debug, Clone)]
pub enum RecurrentCell {
    Rnn(RnnCell),
    Lstm(LstmCell),
    Gru(GruCell),
}

impl RecurrentCell {
    pub fn new(
        kind: CellKind,
        prefix: &str,
        input: usize,
        dim: usize,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> RecurrentCell {
        match kind {
            CellKind::Rnn => RecurrentCell::Rnn(RnnCell::new(prefix, input, dim, params, rng)),
            CellKind::Lstm => RecurrentCell::Lstm(LstmCell::new(prefix, input, dim, params, rng)),
            CellKind::Gru => RecurrentCell::Gru(GruCell::new(
                prefix,
                input,
                dim,
                GruBias::default(),
                params,
                rng,
            )),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            RecurrentCell::Rnn(c) => c.dim,
            RecurrentCell::Lstm(c) => c.dim,
            RecurrentCell::Gru(c) => c.dim,
        }
    }

    pub fn has_memory(&self) -> bool {
        matches!(self, RecurrentCell::Lstm(_))
    }

    pub fn zero_state(&self, tape: &mut Tape) -> CellState {
        let h = tape.constant(Tensor::zeros(vec![self.dim()]));
        let m = self
            .has_memory()
            .then(|| tape.constant(Tensor::zeros(vec![self.dim()])));
        CellState { h, m }
    }

    /// State with a given hidden vector and zero memory.
    pub fn state_from(&self, tape: &mut Tape, h: NodeId) -> CellState {
        let m = self
            .has_memory()
            .then(|| tape.constant(Tensor::zeros(vec![self.dim()])));
        CellState { h, m }
    }

    pub fn step(&self, tape: &mut Tape, x: NodeId, state: &CellState) -> CellState {
        match self {
            RecurrentCell::Rnn(c) => CellState {
                h: c.step(tape, x, state.h),
                m: None,
            },
            RecurrentCell::Lstm(c) => {
                let (h, m) = c.step(tape, x, state.h, state.m.expect("LSTM state"));
                CellState { h, m: Some(m) }
            }
            RecurrentCell::Gru(c) => CellState {
                h: c.step(tape, x, state.h),
                m: None,
            },
        }
    }
}

/// How hidden layers of a deep recurrent model are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthMode {
    /// Every layer is recurrent: layer i at time t sees its own state at
    /// t-1 and the layer below at t.
    #[default]
    Stacked,
    /// Only the first layer is recurrent, conditioned on the *last* layer's
    /// previous output; upper layers are feed-forward transitions.
    Transition,
    /// Encoder-only: stacked layers alternate left-to-right and
    /// right-to-left sweeps.
    Alternating,
}

impl DepthMode {
    pub fn parse(s: &str) -> Option<DepthMode> {
        match s {
            "stacked" => Some(DepthMode::Stacked),
            "transition" => Some(DepthMode::Transition),
            "alternating" => Some(DepthMode::Alternating),
            _ => None,
        }
    }
}

/// A column of recurrent layers stepped together, supporting the stacked and
/// transition wirings. Depth 1 is exactly a single cell.
#[derive(Debug, Clone)]
pub struct RnnStack {
    cells: Vec<RecurrentCell>,
    transitions: Vec<FeedForward>,
    mode: DepthMode,
    dim: usize,
}

impl RnnStack {
    pub fn new(
        kind: CellKind,
        prefix: &str,
        input: usize,
        dim: usize,
        depth: usize,
        mode: DepthMode,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> RnnStack {
        assert!(depth >= 1);
        assert!(
            mode != DepthMode::Alternating,
            "alternating wiring is handled by the encoder"
        );
        let mut cells = Vec::new();
        let mut transitions = Vec::new();
        match mode {
            DepthMode::Stacked => {
                for i in 0..depth {
                    let inp = if i == 0 { input } else { dim };
                    cells.push(RecurrentCell::new(
                        kind,
                        &format!("{prefix}.l{i}"),
                        inp,
                        dim,
                        params,
                        rng,
                    ));
                }
            }
            DepthMode::Transition => {
                cells.push(RecurrentCell::new(
                    kind,
                    &format!("{prefix}.l0"),
                    input,
                    dim,
                    params,
                    rng,
                ));
                for i in 1..depth {
                    transitions.push(FeedForward::new(
                        &format!("{prefix}.l{i}"),
                        dim,
                        dim,
                        Some(Activation::Tanh),
                        LayerKind::Hidden,
                        params,
                        rng,
                    ));
                }
            }
            DepthMode::Alternating => unreachable!(),
        }
        RnnStack {
            cells,
            transitions,
            mode,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state_count(&self) -> usize {
        self.cells.len()
    }

    pub fn zero_states(&self, tape: &mut Tape) -> Vec<CellState> {
        self.cells.iter().map(|c| c.zero_state(tape)).collect()
    }

    /// Initial states with a given hidden vector in the first layer.
    pub fn states_from(&self, tape: &mut Tape, h: NodeId) -> Vec<CellState> {
        let mut states = vec![self.cells[0].state_from(tape, h)];
        for c in &self.cells[1..] {
            states.push(c.zero_state(tape));
        }
        states
    }

    /// One time step. Returns the new states and the top-layer output.
    pub fn step(
        &self,
        tape: &mut Tape,
        x: NodeId,
        states: &[CellState],
    ) -> (Vec<CellState>, NodeId) {
        match self.mode {
            DepthMode::Stacked => {
                let mut new_states = Vec::with_capacity(self.cells.len());
                let mut inp = x;
                for (cell, state) in self.cells.iter().zip(states) {
                    let s = cell.step(tape, inp, state);
                    inp = s.h;
                    new_states.push(s);
                }
                (new_states, inp)
            }
            DepthMode::Transition => {
                // first layer is conditioned on the previous top output
                let s0 = self.cells[0].step(tape, x, &states[0]);
                let mut h = s0.h;
                for ff in &self.transitions {
                    h = ff.apply(tape, h);
                }
                (vec![CellState { h, m: s0.m }], h)
            }
            DepthMode::Alternating => unreachable!(),
        }
    }
}

/// Inverted dropout: zero each element with probability `rate` at training
/// time and scale survivors by 1/(1-rate), so inference is a no-op.
#[derive(Debug, Clone, Copy)]
pub struct DropoutSpec {
    pub rate: f32,
}

impl DropoutSpec {
    pub fn new(rate: f32) -> DropoutSpec {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate}");
        DropoutSpec { rate }
    }

    pub fn sample_mask<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<f32> {
        let keep = 1.0 - self.rate;
        (0..len)
            .map(|_| {
                if rng.gen::<f32>() < self.rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect()
    }
}

/// Applies dropout to a node at training time; identity otherwise.
pub fn dropout_apply<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: NodeId,
    spec: DropoutSpec,
    training: bool,
    rng: &mut R,
) -> NodeId {
    if !training || spec.rate == 0.0 {
        return x;
    }
    let len = tape.node_len(x);
    let mask = spec.sample_mask(len, rng);
    tape.dropout(x, mask)
}
