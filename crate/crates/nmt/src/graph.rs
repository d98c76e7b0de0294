//! Dynamic computation graph with forward evaluation and reverse-mode
//! gradient computation.
//!
//! A [`Tape`] is built per example (or per batch), fully unrolled, evaluated
//! forward in creation order, swept backward once, and then discarded.
//! Parameters live outside the tape in a [`ParamSet`] and are referenced by
//! leaf nodes, so several tapes can run concurrently over shared read-only
//! parameters; their gradients are reduced afterwards.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Activation, Tensor};

/// Probabilities are clamped here before taking logs, so early-training zeros
/// cannot produce infinities.
pub const LOG_CLAMP: f32 = 1e-12;

/// Handle to a parameter stored in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named model parameter.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Owning container for all parameters of a model. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name `{}`",
            name
        );
        self.params.push(Parameter {
            name,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].trainable = false;
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }
}

/// Gradients w.r.t. every parameter touched by a backward pass, indexed by
/// [`ParamId`]. Missing entries mean the parameter did not appear on the tape.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn empty(param_count: usize) -> GradStore {
        GradStore {
            grads: vec![None; param_count],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Sums another gradient store into this one.
    pub fn accumulate(&mut self, other: &GradStore) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.insert(ParamId(i), g.clone());
            }
        }
    }

    pub fn scale(&mut self, c: f32) {
        for g in self.grads.iter_mut().flatten() {
            *g = g.scale(c);
        }
    }

    /// Global L2 norm over all stored gradients, f64 accumulation.
    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum();
        sq.sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(ParamId),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// Adds a vector to every row of a matrix.
    AddBias(NodeId, NodeId),
    Act(Activation, NodeId),
    /// Softmax over a vector, or row-wise over a matrix.
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Log(NodeId),
    Exp(NodeId),
    /// log(sum(exp(x))) over all elements, yielding a scalar.
    LogSumExp(NodeId),
    SumAll(NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId, f32),
    /// Identity in the forward pass; gradients do not flow through.
    Detach(NodeId),
    Transpose(NodeId),
    /// Elementwise 1/x. Inputs must stay away from zero.
    Reciprocal(NodeId),
    /// Single element of a vector as a scalar node.
    Element(NodeId, usize),
    /// Row lookup into a matrix (embedding select).
    Rows {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Stacks k same-shape inputs: scalars into a vector, vectors into a matrix.
    Stack(Vec<NodeId>),
    Concat(NodeId, NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f32>,
    },
    L2Loss {
        y: NodeId,
        target: Tensor,
    },
    NllLoss {
        p: NodeId,
        index: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Input values for a forward pass, keyed by input-leaf name.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    map: HashMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Bindings {
        Bindings::default()
    }

    pub fn set(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

/// Append-only recorded computation graph. Topological order is creation
/// order; the graph is acyclic because an op can only reference existing
/// nodes.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    param_leaves: HashMap<ParamId, NodeId>,
    input_leaves: HashMap<String, NodeId>,
    forwarded: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Tape<'p> {
        Tape {
            params,
            nodes: Vec::new(),
            values: Vec::new(),
            param_leaves: HashMap::new(),
            input_leaves: HashMap::new(),
            forwarded: false,
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.values.push(None);
        self.forwarded = false;
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Element count of a node, known at build time.
    pub fn node_len(&self, id: NodeId) -> usize {
        self.nodes[id.0].shape.iter().product()
    }

    /// Build-time shape of a node.
    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        self.shape(id)
    }

    /// Unbound input leaf; the value is supplied through [`Bindings`] at
    /// forward time. Repeated calls with the same name return the same node.
    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        if let Some(&id) = self.input_leaves.get(name) {
            assert_eq!(self.shape(id), &shape[..], "input `{}` reshaped", name);
            return id;
        }
        let id = self.push(Op::Input(name.to_string()), shape);
        self.input_leaves.insert(name.to_string(), id);
        id
    }

    /// Leaf reading a parameter from the shared [`ParamSet`]. One leaf per
    /// parameter per tape; fan-out accumulation sums the gradients.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_leaves.get(&id) {
            return n;
        }
        let shape = self.params.value(id).shape().to_vec();
        let n = self.push(Op::Param(id), shape);
        self.param_leaves.insert(id, n);
        n
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = match (sa.len(), sb.len()) {
            (2, 2) => {
                assert_eq!(sa[1], sb[0], "matmul {:?} x {:?}", sa, sb);
                vec![sa[0], sb[1]]
            }
            (2, 1) => {
                assert_eq!(sa[1], sb[0], "matmul {:?} x {:?}", sa, sb);
                vec![sa[0]]
            }
            (1, 2) => {
                assert_eq!(sa[0], sb[0], "matmul {:?} x {:?}", sa, sb);
                vec![sb[1]]
            }
            _ => panic!("matmul on ranks {:?} x {:?}", sa, sb),
        };
        self.push(Op::MatMul(a, b), shape)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "dot shapes differ");
        assert_eq!(self.shape(a).len(), 1, "dot expects vectors");
        self.push(Op::Dot(a, b), vec![1])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes differ");
        let shape = self.shape(a).to_vec();
        self.push(Op::Add(a, b), shape)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes differ");
        let shape = self.shape(a).to_vec();
        self.push(Op::Sub(a, b), shape)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "hadamard shapes differ");
        let shape = self.shape(a).to_vec();
        self.push(Op::Hadamard(a, b), shape)
    }

    /// Adds vector `bias` to each row of matrix `m`.
    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> NodeId {
        let (sm, sb) = (self.shape(m).to_vec(), self.shape(bias).to_vec());
        assert_eq!(sm.len(), 2);
        assert_eq!(sb, vec![sm[1]], "bias width mismatch");
        self.push(Op::AddBias(m, bias), sm)
    }

    pub fn activation(&mut self, kind: Activation, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Act(kind, a), shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.activation(Activation::Tanh, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.activation(Activation::Relu, a)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        assert!(shape.len() <= 2, "softmax on rank {:?}", shape);
        self.push(Op::Softmax(a), shape)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let sx = self.shape(x).to_vec();
        let width = *sx.last().unwrap();
        assert_eq!(self.shape(gain), &[width], "gain width mismatch");
        assert_eq!(self.shape(bias), &[width], "bias width mismatch");
        self.push(Op::LayerNorm { x, gain, bias }, sx)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log(a), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a), shape)
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSumExp(a), vec![1])
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), vec![1])
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), shape)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, c), shape)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    /// Identity forward, zero backward. Used to truncate back-propagation
    /// through time.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Detach(a), shape)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2, "transpose needs a matrix");
        self.push(Op::Transpose(a), vec![s[1], s[0]])
    }

    pub fn reciprocal(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Reciprocal(a), shape)
    }

    /// Scalar node holding element `i` of a vector node.
    pub fn element(&mut self, a: NodeId, i: usize) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 1, "element() needs a vector");
        assert!(i < s[0], "element {} of {:?}", i, s);
        self.push(Op::Element(a, i), vec![1])
    }

    /// Row lookup: selects rows of a matrix node. Gradient flows only into
    /// the selected rows. Errors when an id is out of range.
    pub fn rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        assert_eq!(st.len(), 2, "rows() needs a matrix");
        for &id in ids {
            if id >= st[0] {
                return Err(Error::TokenRange { id, size: st[0] });
            }
        }
        let shape = if ids.len() == 1 {
            vec![st[1]]
        } else {
            vec![ids.len(), st[1]]
        };
        Ok(self.push(
            Op::Rows {
                table,
                ids: ids.to_vec(),
            },
            shape,
        ))
    }

    /// Stacks same-shape nodes: k scalars become a k-vector, k d-vectors a
    /// k x d matrix.
    pub fn stack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack of nothing");
        let s0 = self.shape(parts[0]).to_vec();
        for &p in parts {
            assert_eq!(self.shape(p), &s0[..], "stack shapes differ");
        }
        let shape = if s0 == [1] {
            vec![parts.len()]
        } else {
            assert_eq!(s0.len(), 1, "stack expects scalars or vectors");
            vec![parts.len(), s0[0]]
        };
        self.push(Op::Stack(parts.to_vec()), shape)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 1);
        assert_eq!(sb.len(), 1);
        self.push(Op::Concat(a, b), vec![sa[0] + sb[0]])
    }

    /// Applies a pre-sampled inverted-dropout mask (zeros and 1/(1-rate)
    /// survivors).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f32>) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.iter().product::<usize>(), mask.len());
        self.push(Op::Dropout { x, mask }, shape)
    }

    /// L2 loss node: 1/2 * sum((t - y)^2). Gradient rule d/dy = -(t - y).
    pub fn l2_loss(&mut self, y: NodeId, target: Tensor) -> Result<NodeId> {
        if self.shape(y) != target.shape() {
            return Err(Error::Shape {
                op: "l2_loss",
                lhs: self.shape(y).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        Ok(self.push(Op::L2Loss { y, target }, vec![1]))
    }

    /// Negative log-likelihood of entry `index` of a probability vector,
    /// with the probability clamped at [`LOG_CLAMP`].
    pub fn nll_loss(&mut self, p: NodeId, index: usize) -> Result<NodeId> {
        let sp = self.shape(p).to_vec();
        assert_eq!(sp.len(), 1, "nll_loss expects a probability vector");
        if index >= sp[0] {
            return Err(Error::TokenRange {
                id: index,
                size: sp[0],
            });
        }
        Ok(self.push(Op::NllLoss { p, index }, vec![1]))
    }

    /// Computes every node's value in creation order. All input leaves must
    /// be bound.
    pub fn forward(&mut self, bindings: &Bindings) -> Result<()> {
        for i in 0..self.nodes.len() {
            let value = self.eval(i, bindings)?;
            debug_assert_eq!(value.shape(), &self.nodes[i].shape[..]);
            self.values[i] = Some(value);
        }
        self.forwarded = true;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0]
            .as_ref()
            .expect("value read before forward()")
    }

    /// Value of a node after [`Tape::forward`].
    pub fn value(&self, id: NodeId) -> &Tensor {
        assert!(self.forwarded, "value() before forward()");
        self.val(id)
    }

    fn eval(&self, i: usize, bindings: &Bindings) -> Result<Tensor> {
        Ok(match &self.nodes[i].op {
            Op::Input(name) => bindings
                .get(name)
                .ok_or_else(|| Error::MissingBinding(name.clone()))
                .and_then(|t| {
                    if t.shape() == &self.nodes[i].shape[..] {
                        Ok(t.clone())
                    } else {
                        Err(Error::Shape {
                            op: "binding",
                            lhs: self.nodes[i].shape.clone(),
                            rhs: t.shape().to_vec(),
                        })
                    }
                })?,
            Op::Param(id) => self.params.value(*id).clone(),
            Op::Const(t) => t.clone(),
            Op::MatMul(a, b) => tensor::matmul(self.val(*a), self.val(*b))?,
            Op::Dot(a, b) => tensor::dot(self.val(*a), self.val(*b))?,
            Op::Add(a, b) => self.val(*a).add(self.val(*b)),
            Op::Sub(a, b) => self.val(*a).sub(self.val(*b)),
            Op::Hadamard(a, b) => self.val(*a).hadamard(self.val(*b)),
            Op::AddBias(m, bias) => {
                let (m, bias) = (self.val(*m), self.val(*bias));
                let mut out = m.clone();
                let c = bias.len();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v += bias.data()[i % c];
                }
                out
            }
            Op::Act(kind, a) => tensor::activation(*kind, self.val(*a)),
            Op::Softmax(a) => {
                let x = self.val(*a);
                if x.rank() == 1 {
                    tensor::softmax(x)
                } else {
                    tensor::softmax_rows(x)
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (self.val(*x), self.val(*gain), self.val(*bias));
                if x.rank() == 1 {
                    tensor::layer_norm(x, gain, bias)
                } else {
                    let (r, c) = (x.shape()[0], x.shape()[1]);
                    let mut out = Tensor::zeros(vec![r, c]);
                    for i in 0..r {
                        let row = tensor::layer_norm(&Tensor::vector(x.row(i).to_vec()), gain, bias);
                        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(row.data());
                    }
                    out
                }
            }
            Op::Log(a) => self.val(*a).map(|x| x.max(LOG_CLAMP).ln()),
            Op::Exp(a) => self.val(*a).map(f32::exp),
            Op::LogSumExp(a) => {
                let x = self.val(*a);
                let max = x.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let sum: f64 = x.data().iter().map(|&v| (v as f64 - max).exp()).sum();
                Tensor::scalar((max + sum.ln()) as f32)
            }
            Op::SumAll(a) => Tensor::scalar(self.val(*a).sum() as f32),
            Op::Scale(a, c) => self.val(*a).scale(*c),
            Op::AddScalar(a, c) => self.val(*a).map(|x| x + c),
            Op::Detach(a) => self.val(*a).clone(),
            Op::Transpose(a) => self.val(*a).transpose(),
            Op::Reciprocal(a) => self.val(*a).map(|x| 1.0 / x),
            Op::Element(a, i) => Tensor::scalar(self.val(*a).data()[*i]),
            Op::Rows { table, ids } => {
                let t = self.val(*table);
                let c = t.shape()[1];
                if ids.len() == 1 {
                    Tensor::vector(t.row(ids[0]).to_vec())
                } else {
                    let mut data = Vec::with_capacity(ids.len() * c);
                    for &id in ids {
                        data.extend_from_slice(t.row(id));
                    }
                    Tensor::new(vec![ids.len(), c], data)
                }
            }
            Op::Stack(parts) => {
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.val(p).data());
                }
                Tensor::new(self.nodes[i].shape.clone(), data)
            }
            Op::Concat(a, b) => {
                let mut data = self.val(*a).data().to_vec();
                data.extend_from_slice(self.val(*b).data());
                Tensor::vector(data)
            }
            Op::Dropout { x, mask } => {
                let mut out = self.val(*x).clone();
                for (v, &m) in out.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                out
            }
            Op::L2Loss { y, target } => {
                let y = self.val(*y);
                let acc: f64 = y
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&y, &t)| 0.5 * ((t - y) as f64).powi(2))
                    .sum();
                Tensor::scalar(acc as f32)
            }
            Op::NllLoss { p, index } => {
                let p = self.val(*p).data()[*index].max(LOG_CLAMP);
                Tensor::scalar(-(p as f64).ln() as f32)
            }
        })
    }

    /// Reverse sweep from a scalar loss node. Returns the gradients collected
    /// on parameter leaves. Fan-out gradients are summed; the loss seed
    /// gradient is 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradStore> {
        if !self.forwarded {
            return Err(Error::State("backward() before forward()"));
        }
        if self.nodes[loss.0].shape != [1] {
            return Err(Error::State("loss node is not a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut store = GradStore::empty(self.params.len());
        for (&pid, &leaf) in &self.param_leaves {
            if let Some(g) = grads[leaf.0].take() {
                store.insert(pid, g);
            }
        }
        Ok(store)
    }

    /// Gradient of the loss w.r.t. an arbitrary node, for tests and
    /// inspection. Same sweep as [`Tape::backward`] but keeps all node
    /// gradients.
    pub fn backward_full(&mut self, loss: NodeId) -> Result<(GradStore, Vec<Option<Tensor>>)> {
        if !self.forwarded {
            return Err(Error::State("backward() before forward()"));
        }
        if self.nodes[loss.0].shape != [1] {
            return Err(Error::State("loss node is not a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut store = GradStore::empty(self.params.len());
        for (&pid, &leaf) in &self.param_leaves {
            if let Some(g) = grads[leaf.0].clone() {
                store.insert(pid, g);
            }
        }
        Ok((store, grads))
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], id: NodeId, t: Tensor| match &mut grads[id.0] {
            Some(a) => a.add_assign(&t),
            slot => *slot = Some(t),
        };
        match &self.nodes[i].op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) | Op::Detach(_) => {
                if let Op::Detach(_) = self.nodes[i].op {
                    // gradient deliberately not propagated
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                match (va.rank(), vb.rank()) {
                    (2, 2) => {
                        let da = tensor::matmul(g, &vb.transpose()).unwrap();
                        let db = tensor::matmul(&va.transpose(), g).unwrap();
                        acc(grads, *a, da);
                        acc(grads, *b, db);
                    }
                    (2, 1) => {
                        // out[m] = A[m,k] * b[k]
                        let (m, k) = (va.shape()[0], va.shape()[1]);
                        let mut da = Tensor::zeros(vec![m, k]);
                        for r in 0..m {
                            for c in 0..k {
                                da.data_mut()[r * k + c] = g.data()[r] * vb.data()[c];
                            }
                        }
                        let db = tensor::matmul(&va.transpose(), g).unwrap();
                        acc(grads, *a, da);
                        acc(grads, *b, db);
                    }
                    (1, 2) => {
                        // out[n] = a[k] * B[k,n]
                        let (k, n) = (vb.shape()[0], vb.shape()[1]);
                        let da = tensor::matmul(vb, g).unwrap();
                        let mut db = Tensor::zeros(vec![k, n]);
                        for r in 0..k {
                            for c in 0..n {
                                db.data_mut()[r * n + c] = va.data()[r] * g.data()[c];
                            }
                        }
                        acc(grads, *a, da);
                        acc(grads, *b, db);
                    }
                    _ => unreachable!(),
                }
            }
            Op::Dot(a, b) => {
                let s = g.item();
                acc(grads, *a, self.val(*b).scale(s));
                acc(grads, *b, self.val(*a).scale(s));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                acc(grads, *a, g.hadamard(self.val(*b)));
                acc(grads, *b, g.hadamard(self.val(*a)));
            }
            Op::AddBias(m, bias) => {
                acc(grads, *m, g.clone());
                let c = self.val(*bias).len();
                let mut db = Tensor::zeros(vec![c]);
                for (i, &v) in g.data().iter().enumerate() {
                    db.data_mut()[i % c] += v;
                }
                acc(grads, *bias, db);
            }
            Op::Act(kind, a) => {
                let arg = match kind {
                    Activation::Relu => self.val(*a),      // pre-activation
                    _ => self.values[i].as_ref().unwrap(), // forward output
                };
                let d = tensor::activation_grad(*kind, arg);
                acc(grads, *a, g.hadamard(&d));
            }
            Op::Softmax(a) => {
                let y = self.values[i].as_ref().unwrap();
                let mut dx = Tensor::zeros(y.shape().to_vec());
                let cols = *y.shape().last().unwrap();
                let rows = y.len() / cols;
                for r in 0..rows {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let inner: f64 = ys
                        .iter()
                        .zip(gs)
                        .map(|(&y, &g)| y as f64 * g as f64)
                        .sum();
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] =
                            (ys[c] as f64 * (gs[c] as f64 - inner)) as f32;
                    }
                }
                acc(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.val(*x);
                let gv = self.val(*gain);
                let cols = *xv.shape().last().unwrap();
                let rows = xv.len() / cols;
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let mut dgain = Tensor::zeros(vec![cols]);
                let mut dbias = Tensor::zeros(vec![cols]);
                let eps = tensor::LAYER_NORM_EPS as f64;
                for r in 0..rows {
                    let xs = &xv.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let (mean, std) = tensor::mean_std(xs);
                    let denom = std + eps;
                    let xhat: Vec<f64> =
                        xs.iter().map(|&v| (v as f64 - mean) / denom).collect();
                    // w = upstream grad w.r.t. the normalized values
                    let w: Vec<f64> = gs
                        .iter()
                        .zip(gv.data())
                        .map(|(&g, &gn)| g as f64 * gn as f64)
                        .collect();
                    let mean_w = w.iter().sum::<f64>() / cols as f64;
                    let mean_wx = w
                        .iter()
                        .zip(&xhat)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
                        / cols as f64;
                    let proj = if std > 1e-12 { mean_wx * denom / std } else { 0.0 };
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] =
                            ((w[c] - mean_w - proj * xhat[c]) / denom) as f32;
                        dgain.data_mut()[c] += (gs[c] as f64 * xhat[c]) as f32;
                        dbias.data_mut()[c] += gs[c];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::Log(a) => {
                let x = self.val(*a);
                acc(grads, *a, g.zip(x, |g, x| g / x.max(LOG_CLAMP)));
            }
            Op::Exp(a) => {
                let y = self.values[i].as_ref().unwrap();
                acc(grads, *a, g.hadamard(y));
            }
            Op::LogSumExp(a) => {
                let x = self.val(*a);
                let p = if x.rank() == 1 {
                    tensor::softmax(x)
                } else {
                    let flat = Tensor::vector(x.data().to_vec());
                    tensor::softmax(&flat)
                };
                let mut dx = p.scale(g.item());
                if x.rank() != 1 {
                    dx = Tensor::new(x.shape().to_vec(), dx.data().to_vec());
                }
                acc(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let shape = self.val(*a).shape().to_vec();
                let n = shape.iter().product();
                acc(grads, *a, Tensor::new(shape, vec![g.item(); n]));
            }
            Op::Scale(a, c) => acc(grads, *a, g.scale(*c)),
            Op::AddScalar(a, _) => acc(grads, *a, g.clone()),
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Reciprocal(a) => {
                let x = self.val(*a);
                acc(grads, *a, g.zip(x, |g, x| -g / (x * x)));
            }
            Op::Element(a, idx) => {
                let mut dx = Tensor::zeros(self.val(*a).shape().to_vec());
                dx.data_mut()[*idx] = g.item();
                acc(grads, *a, dx);
            }
            Op::Rows { table, ids } => {
                let t = self.val(*table);
                let c = t.shape()[1];
                let mut dt = Tensor::zeros(t.shape().to_vec());
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt.data_mut()[id * c + j] += g.data()[k * c + j];
                    }
                }
                acc(grads, *table, dt);
            }
            Op::Stack(parts) => {
                let stride = self.val(parts[0]).len();
                for (k, &p) in parts.iter().enumerate() {
                    let shape = self.val(p).shape().to_vec();
                    let slice = g.data()[k * stride..(k + 1) * stride].to_vec();
                    acc(grads, p, Tensor::new(shape, slice));
                }
            }
            Op::Concat(a, b) => {
                let na = self.val(*a).len();
                acc(grads, *a, Tensor::vector(g.data()[..na].to_vec()));
                acc(grads, *b, Tensor::vector(g.data()[na..].to_vec()));
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                for (v, &m) in dx.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                acc(grads, *x, dx);
            }
            Op::L2Loss { y, target } => {
                let yv = self.val(*y);
                let s = g.item();
                // d/dy of 1/2 (t-y)^2 is -(t-y)
                acc(grads, *y, yv.zip(target, |y, t| s * -(t - y)));
            }
            Op::NllLoss { p, index } => {
                let pv = self.val(*p);
                let mut dp = Tensor::zeros(pv.shape().to_vec());
                dp.data_mut()[*index] = -g.item() / pv.data()[*index].max(LOG_CLAMP);
                acc(grads, *p, dp);
            }
        }
    }
}
