use std::cell::RefCell;

use super::{
    broadcast_zip, matmul, reduce_to, sigmoid, softmax_rows, transpose2, Result, Tensor,
    TensorError,
};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    SumLast(usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    SliceLast(usize, usize),
    LinComb(Vec<(usize, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the node index is already a
/// topological order and the backward pass is a single reverse sweep.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that only computes values; `backward` on it is a usage error.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf (a parameter or an input we want gradients for).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        let rg = self.recording;
        self.push(value, Op::Leaf, rg)
    }

    /// Untracked leaf: data, masks, control-signal samples.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let (op, requires_grad) = if self.recording && requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn with<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn with2<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !self.recording {
            return Err(TensorError::NotRecording);
        }
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.id];
        if out_node.value.len() != 1 {
            return Err(TensorError::NotScalar(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::full(out_node.value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let val = &node.value;
            let mut pending: Vec<(usize, Tensor)> = Vec::with_capacity(2);
            let mut send = |to: usize, t: Tensor| {
                if nodes[to].requires_grad {
                    pending.push((to, t));
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, reduce_to(&g, nodes[*a].value.shape()));
                    send(*b, reduce_to(&g, nodes[*b].value.shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(&g, nodes[*a].value.shape()));
                    send(*b, reduce_to(&g.map(|v| -v), nodes[*b].value.shape()));
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        let ga = broadcast_zip(&g, bv, "mul", |x, y| x * y)?;
                        send(*a, reduce_to(&ga, av.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = broadcast_zip(&g, av, "mul", |x, y| x * y)?;
                        send(*b, reduce_to(&gb, bv.shape()));
                    }
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        send(*a, matmul(&g, &transpose2(bv))?);
                    }
                    if nodes[*b].requires_grad {
                        send(*b, matmul(&transpose2(av), &g)?);
                    }
                }
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Tanh(a) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(val.data())
                        .map(|(&gv, &y)| gv * (1.0 - y * y))
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Sigmoid(a) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(val.data())
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Softmax(a) => {
                    let w = val.last_dim();
                    let mut data = Vec::with_capacity(val.len());
                    for (gr, yr) in g.data().chunks(w).zip(val.data().chunks(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        data.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
                    }
                    send(*a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Scale(a, k) => send(*a, g.map(|v| v * k)),
                Op::AddScalar(a) => send(*a, g),
                Op::Ln(a) => {
                    let x = &nodes[*a].value;
                    let data = g.data().iter().zip(x.data()).map(|(gv, xv)| gv / xv).collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &nodes[*a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > *lo && xv < *hi { gv } else { 0.0 })
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Sum(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    send(*a, Tensor::full(&shape, g.item()));
                }
                Op::SumLast(a) => {
                    let x = &nodes[*a].value;
                    let w = x.last_dim();
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat(gv).take(w))
                        .collect();
                    send(*a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    send(*a, g.reshape(&shape)?);
                }
                Op::Concat(inputs, axis) => {
                    let shape = g.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for &inp in inputs {
                        let ishape = nodes[inp].value.shape().to_vec();
                        let d = ishape[*axis];
                        if nodes[inp].requires_grad {
                            let mut data = Vec::with_capacity(outer * d * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                data.extend_from_slice(&g.data()[base..base + d * inner]);
                            }
                            send(inp, Tensor::new(ishape, data)?);
                        }
                        offset += d;
                    }
                }
                Op::SliceLast(a, start) => {
                    let x = &nodes[*a].value;
                    let w = x.last_dim();
                    let k = g.last_dim();
                    let mut out = Tensor::zeros(x.shape());
                    for (r, gr) in g.data().chunks(k).enumerate() {
                        out.data_mut()[r * w + start..r * w + start + k].copy_from_slice(gr);
                    }
                    send(*a, out);
                }
                Op::LinComb(terms) => {
                    for &(a, k) in terms {
                        send(a, g.map(|v| v * k));
                    }
                }
            }
            for (to, t) in pending {
                match &mut grads[to] {
                    Some(acc) => acc.accumulate(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; exactly zero when `v` is
    /// not on any path to the output.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with(self.id, Tensor::clone)
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        self.tape.with(self.id, f)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with(self.id, |t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let out = self.tape.with(self.id, f)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, op, rg))
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        let out = self.tape.with2(self.id, other.id, f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| {
            broadcast_zip(a, b, "add", |x, y| x + y)
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            broadcast_zip(a, b, "sub", |x, y| x - y)
        })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| {
            broadcast_zip(a, b, "mul", |x, y| x * y)
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id), matmul)
    }

    pub fn relu(self) -> Var<'t> {
        self.map_op(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn tanh(self) -> Var<'t> {
        self.map_op(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map_op(Op::Sigmoid(self.id), sigmoid)
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t> {
        self.unary(Op::Softmax(self.id), |t| Ok(softmax_rows(t)))
            .expect("softmax is shape-preserving")
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.map_op(Op::Scale(self.id, k), |v| v * k)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.map_op(Op::AddScalar(self.id), |v| v + k)
    }

    pub fn ln(self) -> Var<'t> {
        self.map_op(Op::Ln(self.id), f64::ln)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map_op(Op::Clamp(self.id, lo, hi), |v| v.clamp(lo, hi))
    }

    fn map_op(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        self.unary(op, |t| Ok(t.map(f)))
            .expect("elementwise maps are shape-preserving")
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |t| Ok(Tensor::scalar(t.sum())))
            .expect("sum cannot fail")
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(self) -> Var<'t> {
        self.unary(Op::SumLast(self.id), |t| {
            let w = t.last_dim();
            let data: Vec<f64> = t.data().chunks(w.max(1)).map(|c| c.iter().sum()).collect();
            let shape = t.shape()[..t.shape().len().saturating_sub(1)].to_vec();
            Tensor::new(shape, data)
        })
        .expect("sum_last cannot fail")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(self.id), |t| t.reshape(shape))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(Op::SliceLast(self.id, start), |t| {
            let w = t.last_dim();
            if start + len > w {
                return Err(TensorError::Shape {
                    op: "slice_last",
                    lhs: t.shape().to_vec(),
                    rhs: vec![start, len],
                });
            }
            let data = t
                .data()
                .chunks(w)
                .flat_map(|r| r[start..start + len].iter().copied())
                .collect();
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::new(shape, data)
        })
    }

    /// `sum_i k_i * x_i` over same-shaped inputs, recorded as one node.
    pub fn lincomb(terms: &[(Var<'t>, f64)]) -> Result<Var<'t>> {
        let tape = terms[0].0.tape;
        let nodes = tape.nodes.borrow();
        let shape = nodes[terms[0].0.id].value.shape().to_vec();
        let mut data = vec![0.0; nodes[terms[0].0.id].value.len()];
        let mut rg = false;
        for (v, k) in terms {
            let t = &nodes[v.id].value;
            if t.shape() != shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "lincomb",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            for (d, x) in data.iter_mut().zip(t.data()) {
                *d += k * x;
            }
            rg |= nodes[v.id].requires_grad;
        }
        drop(nodes);
        let out = Tensor::new(shape, data)?;
        let op = Op::LinComb(terms.iter().map(|(v, k)| (v.id, *k)).collect());
        Ok(tape.push(out, op, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let tape = vars[0].tape;
        let nodes = tape.nodes.borrow();
        let first = nodes[vars[0].id].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for v in vars {
            let s = nodes[v.id].value.shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in vars {
                let t = &nodes[v.id].value;
                let d = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let rg = vars.iter().any(|v| nodes[v.id].requires_grad);
        drop(nodes);
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(tape.push(out, Op::Concat(vars.iter().map(|v| v.id).collect(), axis), rg))
    }
}
