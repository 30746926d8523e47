//! Reverse-mode differentiation over a per-step tape.
//!
//! A [`Graph`] records every forward operation as a node holding its value
//! and the inputs it was computed from. Nodes are appended in evaluation
//! order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep. A graph is meant to live
//! for one forward/backward pass and then be dropped.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Hadamard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    /// Subgradient at exactly zero is taken as 0.
    Relu,
}

#[derive(Clone, Debug)]
pub enum Provenance {
    Leaf { trainable: bool },
    MatMul(Var, Var),
    MatVec(Var, Var),
    Elementwise(ElementwiseOp, Var, Var),
    Activation(Activation, Var),
    Softmax { input: Var, axis: usize },
    Concat { a: Var, b: Var, axis: usize },
    Reshape(Var),
    Transpose(Var),
    Scale(Var, f64),
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Normalize { input: Var, epsilon: f64 },
    Row { input: Var, row: usize },
    StackRows(Vec<Var>),
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub value: Tensor,
    pub gradient: Option<Tensor>,
    pub provenance: Provenance,
}

#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<GraphNode>,
}

/// `(outer, len, inner)` strides for iterating along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn apply_activation(op: Activation, x: f64) -> f64 {
    match op {
        Activation::Sigmoid => sigmoid(x),
        Activation::Tanh => x.tanh(),
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, v: Var) -> &GraphNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].gradient.as_ref()
    }

    fn push(&mut self, value: Tensor, provenance: Provenance) -> Var {
        self.nodes.push(GraphNode {
            value,
            gradient: None,
            provenance,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Provenance::Leaf { trainable: true })
    }

    /// Non-trainable leaf (inputs, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Provenance::Leaf { trainable: false })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for p in 0..k {
                let x = av[i * k + p];
                for j in 0..c {
                    out[i * c + j] += x * bv[p * c + j];
                }
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Provenance::MatMul(a, b)))
    }

    /// Matrix `[r × k]` times vector `[k]`, giving `[r]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w), self.shape(x));
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::dim("matvec", sw, sx));
        }
        let (r, k) = (sw[0], sw[1]);
        let (wv, xv) = (self.value(w).data(), self.value(x).data());
        let out = (0..r)
            .map(|i| {
                wv[i * k..(i + 1) * k]
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok(self.push(Tensor::vector(out), Provenance::MatVec(w, x)))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            let name = match op {
                ElementwiseOp::Add => "add",
                ElementwiseOp::Sub => "sub",
                ElementwiseOp::Hadamard => "hadamard",
            };
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let f = match op {
            ElementwiseOp::Add => |x: f64, y: f64| x + y,
            ElementwiseOp::Sub => |x: f64, y: f64| x - y,
            ElementwiseOp::Hadamard => |x: f64, y: f64| x * y,
        };
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Provenance::Elementwise(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Hadamard, a, b)
    }

    pub fn activation(&mut self, op: Activation, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("{op:?} input")));
        }
        let value = t.map(|x| apply_activation(op, x));
        Ok(self.push(value, Provenance::Activation(op, a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Relu, a)
    }

    /// Softmax along `axis`, with max-subtraction per slice.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Provenance::Softmax { input: a, axis }))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(Error::dim("concat", &sa, &sb));
        }
        let (outer, la, inner) = axis_split(&sa, axis);
        let lb = sb[axis];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&bv[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa;
        shape[axis] = la + lb;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Provenance::Concat { a, b, axis }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(value, Provenance::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::dim("transpose", t.shape(), &[0, 0]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Provenance::Transpose(a)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Provenance::Scale(a, factor))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Provenance::Sum(a))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::Contract(format!(
                "sum axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + k) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Provenance::SumAxis { input: a, axis }))
    }

    /// `(x - mean(x)) / sqrt(var(x) + epsilon)` over all elements of a vector.
    pub fn normalize(&mut self, a: Var, epsilon: f64) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || t.len() < 2 {
            return Err(Error::Contract(format!(
                "normalize needs a vector of length >= 2, got {:?}",
                t.shape()
            )));
        }
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + epsilon).sqrt();
        let value = t.map(|x| (x - mean) * inv);
        Ok(self.push(value, Provenance::Normalize { input: a, epsilon }))
    }

    /// Row `row` of a rank-2 tensor, as a vector.
    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || row >= t.shape()[0] {
            return Err(Error::Contract(format!(
                "row {row} out of range for shape {:?}",
                t.shape()
            )));
        }
        let value = Tensor::vector(t.row(row).to_vec());
        Ok(self.push(value, Provenance::Row { input: a, row }))
    }

    /// Stacks equal-length vectors into a `[rows.len() × n]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Contract("stack_rows of zero rows".into()))?;
        let n = self.shape(*first).to_vec();
        if n.len() != 1 {
            return Err(Error::dim("stack_rows", &n, &[0]));
        }
        let mut data = Vec::with_capacity(rows.len() * n[0]);
        for &r in rows {
            if self.shape(r) != n.as_slice() {
                return Err(Error::dim("stack_rows", &n, self.shape(r)));
            }
            data.extend_from_slice(self.value(r).data());
        }
        let value = Tensor::new(vec![rows.len(), n[0]], data)?;
        Ok(self.push(value, Provenance::StackRows(rows.to_vec())))
    }

    /// Propagates `d loss / d node` to every node on the tape.
    ///
    /// Gradients from a previous call are cleared first. Nodes the loss does
    /// not depend on receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for idx in (0..count).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.gradient = Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())));
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut accumulate = |v: Var, g: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let node = &self.nodes[idx];
        let out = &node.value;
        let u = up.data();
        match &node.provenance {
            Provenance::Leaf { .. } => {}
            Provenance::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (av, bv) = (ta.data(), tb.data());
                let mut ga = vec![0.0; r * k];
                let mut gb = vec![0.0; k * c];
                for i in 0..r {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += u[i * c + j] * bv[p * c + j];
                            gb[p * c + j] += av[i * k + p] * u[i * c + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                accumulate(*a, Tensor::new(vec![r, k], ga).expect("shape"));
                accumulate(*b, Tensor::new(vec![k, c], gb).expect("shape"));
            }
            Provenance::MatVec(w, x) => {
                let (tw, tx) = (self.value(*w), self.value(*x));
                let (r, k) = (tw.shape()[0], tw.shape()[1]);
                let (wv, xv) = (tw.data(), tx.data());
                let mut gw = vec![0.0; r * k];
                let mut gx = vec![0.0; k];
                for i in 0..r {
                    for p in 0..k {
                        gw[i * k + p] = u[i] * xv[p];
                        gx[p] += wv[i * k + p] * u[i];
                    }
                }
                accumulate(*w, Tensor::new(vec![r, k], gw).expect("shape"));
                accumulate(*x, Tensor::vector(gx));
            }
            Provenance::Elementwise(op, a, b) => match op {
                ElementwiseOp::Add => {
                    accumulate(*a, up.clone());
                    accumulate(*b, up.clone());
                }
                ElementwiseOp::Sub => {
                    accumulate(*a, up.clone());
                    accumulate(*b, up.map(|x| -x));
                }
                ElementwiseOp::Hadamard => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = u.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    let gb = u.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    accumulate(*a, Tensor::new(ta.shape().to_vec(), ga).expect("shape"));
                    accumulate(*b, Tensor::new(tb.shape().to_vec(), gb).expect("shape"));
                }
            },
            Provenance::Activation(op, a) => {
                let input = self.value(*a);
                let local: Vec<f64> = match op {
                    Activation::Sigmoid => out.data().iter().map(|s| s * (1.0 - s)).collect(),
                    Activation::Tanh => out.data().iter().map(|t| 1.0 - t * t).collect(),
                    Activation::Relu => input
                        .data()
                        .iter()
                        .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                        .collect(),
                };
                let g = u.iter().zip(&local).map(|(g, d)| g * d).collect();
                accumulate(*a, Tensor::new(out.shape().to_vec(), g).expect("shape"));
            }
            Provenance::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| u[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            g[idx(k)] = y[idx(k)] * (u[idx(k)] - dot);
                        }
                    }
                }
                accumulate(*input, Tensor::new(out.shape().to_vec(), g).expect("shape"));
            }
            Provenance::Concat { a, b, axis } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (outer, la, inner) = axis_split(&sa, *axis);
                let lb = sb[*axis];
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                let block = (la + lb) * inner;
                for o in 0..outer {
                    let base = o * block;
                    ga.extend_from_slice(&u[base..base + la * inner]);
                    gb.extend_from_slice(&u[base + la * inner..base + block]);
                }
                accumulate(*a, Tensor::new(sa, ga).expect("shape"));
                accumulate(*b, Tensor::new(sb, gb).expect("shape"));
            }
            Provenance::Reshape(a) => {
                let g = up.reshaped(self.shape(*a)).expect("shape");
                accumulate(*a, g);
            }
            Provenance::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] = u[i * c + j];
                    }
                }
                accumulate(*a, Tensor::new(vec![c, r], g).expect("shape"));
            }
            Provenance::Scale(a, factor) => accumulate(*a, up.map(|x| x * factor)),
            Provenance::Sum(a) => {
                accumulate(*a, Tensor::filled(self.shape(*a), u[0]));
            }
            Provenance::SumAxis { input, axis } => {
                let shape = self.shape(*input).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            g[(o * len + k) * inner + i] = u[o * inner + i];
                        }
                    }
                }
                accumulate(*input, Tensor::new(shape, g).expect("shape"));
            }
            Provenance::Normalize { input, epsilon } => {
                // y = (x - mu) * s, s = (var + eps)^-1/2
                // dx = s * (u - mean(u) - y * mean(u * y))
                let x = self.value(*input);
                let n = x.len() as f64;
                let mean = x.sum() / n;
                let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let s = 1.0 / (var + epsilon).sqrt();
                let y = out.data();
                let mean_u = u.iter().sum::<f64>() / n;
                let mean_uy = u.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                let g = u
                    .iter()
                    .zip(y)
                    .map(|(ui, yi)| s * (ui - mean_u - yi * mean_uy))
                    .collect();
                accumulate(*input, Tensor::vector(g));
            }
            Provenance::Row { input, row } => {
                let shape = self.shape(*input).to_vec();
                let c = shape[1];
                let mut g = Tensor::zeros(&shape);
                g.data_mut()[row * c..(row + 1) * c].copy_from_slice(u);
                accumulate(*input, g);
            }
            Provenance::StackRows(rows) => {
                let c = out.shape()[1];
                for (i, r) in rows.iter().enumerate() {
                    accumulate(*r, Tensor::vector(u[i * c..(i + 1) * c].to_vec()));
                }
            }
        }
    }
}
