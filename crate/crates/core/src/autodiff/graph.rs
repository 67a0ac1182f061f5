use std::sync::atomic::{AtomicU64, Ordering};

use super::primitive::{self, Aux, Padding, Primitive};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Identifies a parameter slot of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    store: u64,
    index: usize,
}

#[derive(Debug)]
enum Source {
    Constant,
    Input,
    Param(ParamKey),
    Op(Primitive, Aux),
}

#[derive(Debug)]
struct Node {
    source: Source,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// A dynamic computation graph recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. [`Graph::backward`] consumes the recording; any later
/// use of its variables is a [`Error::StaleGraph`].
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { id: fresh_id(), nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::ForeignVar);
        }
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        Ok(v.index)
    }

    fn push(&mut self, source: Source, inputs: Vec<usize>, value: Tensor, rg: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        self.nodes.push(Node { source, inputs, value, requires_grad: rg });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Source::Constant, Vec::new(), t, false)
            .expect("constant on a consumed graph")
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Source::Input, Vec::new(), t, true)
            .expect("input on a consumed graph")
    }

    pub(crate) fn param_leaf(&mut self, key: ParamKey, t: Tensor) -> Var {
        self.push(Source::Param(key), Vec::new(), t, true)
            .expect("parameter on a consumed graph")
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Copies the value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v)?.clone();
        Ok(self.constant(t))
    }

    /// Evaluates `prim` on `inputs` and records the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let (out, aux) = primitive::forward(&prim, &values)?;
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(Source::Op(prim, aux), idx, out, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root + 1];
        adj[root] = Some(Tensor::full(self.nodes[root].value.shape(), 1.0));
        let mut grads = Gradients::default();
        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.source {
                Source::Constant => {}
                Source::Input => grads.inputs.push((Var { graph: self.id, index: i }, g)),
                // a parameter bound several times gets the sum over its leaves
                Source::Param(key) => match grads.params.iter_mut().find(|(k, _)| k == key) {
                    Some((_, acc)) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => grads.params.push((*key, g)),
                },
                Source::Op(prim, aux) => {
                    let xs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                    let gxs = primitive::backward(prim, aux, &xs, &node.value, &g);
                    for (&j, gx) in node.inputs.iter().zip(gxs) {
                        if !self.nodes[j].requires_grad {
                            continue;
                        }
                        match &mut adj[j] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(gx.data()) {
                                    *a += b;
                                }
                            }
                            slot @ None => *slot = Some(gx),
                        }
                    }
                }
            }
        }
        self.consumed = true;
        self.nodes.clear();
        Ok(grads)
    }
}

/// Convenience wrappers around [`Graph::apply`].
impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddRowBias, &[x, b])
    }
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.apply(Primitive::ChannelAffine, &[x, scale, shift])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape(shape), &[x])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        match bias {
            Some(b) => self.apply(Primitive::Conv2d { padding }, &[x, w, b]),
            None => self.apply(Primitive::Conv2d { padding }, &[x, w]),
        }
    }
    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.apply(Primitive::MaxPool2d { size }, &[x])
    }
    pub fn avgpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.apply(Primitive::AvgPool2d { size }, &[x])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[x])
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, xs)
    }
    pub fn l2_norm_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::L2NormRows, &[x])
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::ScalarMul(c), &[x])
    }
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::ScalarAdd(c), &[x])
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[x])
    }
    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::SelectRows(idx), &[x])
    }
    pub fn gather_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::GatherCols(idx), &[x])
    }
}

/// Output of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    inputs: Vec<(Var, Tensor)>,
    params: Vec<(ParamKey, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.iter().find(|(k, _)| *k == key).map(|(_, g)| g)
    }
}

/// A trainable tensor with its most recent gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Parameter>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { id: fresh_id(), params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamKey {
        self.params.push(Parameter { name: name.into(), value, grad: None });
        ParamKey { store: self.id, index: self.params.len() - 1 }
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey { store: self.id, index }
    }

    pub fn get(&self, key: ParamKey) -> &Parameter {
        debug_assert_eq!(key.store, self.id);
        &self.params[key.index]
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Parameter {
        debug_assert_eq!(key.store, self.id);
        &mut self.params[key.index]
    }

    pub fn find(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Registers the parameter's current value as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, key: ParamKey) -> Var {
        g.param_leaf(key, self.get(key).value.clone())
    }

    /// Copies this store's gradients out of `grads`; parameters the loss did
    /// not reach get a zero gradient.
    pub fn absorb(&mut self, grads: &Gradients) {
        for (i, p) in self.params.iter_mut().enumerate() {
            let key = ParamKey { store: self.id, index: i };
            p.grad = Some(
                grads
                    .param(key)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape())),
            );
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.params
            .iter()
            .fold(0u64, |h, p| h.rotate_left(7) ^ p.value.checksum())
    }
}
