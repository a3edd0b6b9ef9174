//! Reverse-mode automatic differentiation over a tape of [`Tensor`] values.
//!
//! Every operation appends a node to the [`Graph`]; a node only refers to
//! nodes created before it, so the tape order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use super::math;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a traced value inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    OneMinus,
}

impl Elementwise {
    fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Unary {
        x: Var,
        op: Elementwise,
    },
    Binary {
        a: Var,
        b: Var,
        op: Elementwise,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Softmax {
        x: Var,
        mask: Vec<bool>,
    },
    LogSoftmax {
        x: Var,
        mask: Vec<bool>,
    },
    Dot {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Pick {
        x: Var,
        index: usize,
    },
    Stack {
        items: Vec<Var>,
    },
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
    Row {
        table: Var,
        row: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// A tape of traced values.
///
/// A graph belongs to one forward/backward pass. Gradients start at zero and
/// every call to [`Graph::backward`] adds to them.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Gradient as a tensor with the value's shape.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.value.shape().to_vec(), node.grad.clone()).expect("gradient mirrors value shape")
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Matrix product. `b` may be a rank-1 vector, which is treated as a
    /// column and yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || !(sb.len() == 1 || sb.len() == 2) || sa[1] != sb[0] {
            return Err(Error::dimension("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let out_shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }))
    }

    /// Pointwise application of `op` to one or two equally shaped arguments.
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        if args.len() != op.arity() {
            return Err(Error::contract("elementwise arity mismatch"));
        }
        if op.arity() == 1 {
            let x = args[0];
            let data: Vec<f64> = self
                .data(x)
                .iter()
                .map(|&v| match op {
                    Elementwise::Sigmoid => math::sigmoid(v),
                    Elementwise::Tanh => math::tanh(v),
                    Elementwise::OneMinus => 1.0 - v,
                    _ => unreachable!(),
                })
                .collect();
            let value = Tensor::new(self.shape(x).to_vec(), data)?;
            return Ok(self.push(value, Op::Unary { x, op }));
        }
        let (a, b) = (args[0], args[1]);
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension("elementwise", self.shape(a), self.shape(b)));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| match op {
                Elementwise::Add => x + y,
                Elementwise::Sub => x - y,
                Elementwise::Mul => x * y,
                _ => unreachable!(),
            })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Binary { a, b, op }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, &[a, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(Elementwise::Sigmoid, &[x]).expect("unary")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.elementwise(Elementwise::Tanh, &[x]).expect("unary")
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.elementwise(Elementwise::OneMinus, &[x]).expect("unary")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x, factor })
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(Error::dimension("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let tail: usize = sa[axis + 1..].iter().product();
        let a_inner = sa[axis] * tail;
        let b_inner = sb[axis] * tail;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(outer * (a_inner + b_inner));
        for o in 0..outer {
            out.extend_from_slice(&ad[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&bd[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            },
        ))
    }

    /// Softmax restricted to the positions where `mask` is true. Masked
    /// positions are excluded from the normalizer and output exactly zero.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let x = self.data(scores);
        if self.shape(scores).len() != 1 || mask.len() != x.len() {
            return Err(Error::dimension("masked_softmax", self.shape(scores), &[mask.len()]));
        }
        let out = masked_softmax_values(x, mask)?;
        let value = Tensor::vector(out);
        Ok(self.push(
            value,
            Op::Softmax {
                x: scores,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Log of [`Graph::masked_softmax`]; masked positions hold `-inf`.
    pub fn masked_log_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let x = self.data(scores);
        if self.shape(scores).len() != 1 || mask.len() != x.len() {
            return Err(Error::dimension(
                "masked_log_softmax",
                self.shape(scores),
                &[mask.len()],
            ));
        }
        let out = masked_log_softmax_values(x, mask)?;
        let value = Tensor::vector(out);
        Ok(self.push(
            value,
            Op::LogSoftmax {
                x: scores,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension("dot", self.shape(a), self.shape(b)));
        }
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Element `index` of a flat view of `x`, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let d = self.data(x);
        if index >= d.len() {
            return Err(Error::dimension("pick", self.shape(x), &[index]));
        }
        let v = d[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }))
    }

    /// Collects scalars into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(items.len());
        for &item in items {
            if !self.value(item).is_scalar() {
                return Err(Error::dimension("stack", self.shape(item), &[]));
            }
            out.push(self.data(item)[0]);
        }
        Ok(self.push(Tensor::vector(out), Op::Stack { items: items.to_vec() }))
    }

    /// `Σ_j weights[j] · items[j]` for a weight vector and equally shaped items.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let w = self.data(weights);
        if self.shape(weights).len() != 1 || w.len() != items.len() || items.is_empty() {
            return Err(Error::dimension("weighted_sum", self.shape(weights), &[items.len()]));
        }
        let shape = self.shape(items[0]).to_vec();
        let mut out = vec![0.0; self.value(items[0]).numel()];
        for (j, &item) in items.iter().enumerate() {
            if self.shape(item) != shape.as_slice() {
                return Err(Error::dimension("weighted_sum", &shape, self.shape(item)));
            }
            let wj = w[j];
            for (o, &v) in out.iter_mut().zip(self.data(item)) {
                *o += wj * v;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        ))
    }

    /// Row `row` of a rank-2 table.
    pub fn row(&mut self, table: Var, row: usize) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::dimension("row", shape, &[row]));
        }
        if row >= shape[0] {
            return Err(Error::Vocabulary {
                id: row,
                size: shape[0],
            });
        }
        let value = Tensor::vector(self.value(table).row(row).to_vec());
        Ok(self.push(value, Op::Row { table, row }))
    }

    /// Accumulates `∂root/∂v` into the gradient of every node reachable from
    /// `root`. Each node is visited once, in reverse tape order.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::contract("backward requires a scalar root"));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            for (dst, src) in self.nodes[idx].grad.iter_mut().zip(&g) {
                *dst += src;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                {
                    let ga = slot(adj, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                let gb = slot(adj, *b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        for (dst, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *dst += av * gv;
                        }
                    }
                }
            }
            Op::Unary { x, op } => {
                let out = node.value.data();
                let gx = slot(adj, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i]
                        * match op {
                            Elementwise::Sigmoid => out[i] * (1.0 - out[i]),
                            Elementwise::Tanh => 1.0 - out[i] * out[i],
                            Elementwise::OneMinus => -1.0,
                            _ => unreachable!(),
                        };
                }
            }
            Op::Binary { a, b, op } => {
                let (a, b) = (*a, *b);
                match op {
                    Elementwise::Add | Elementwise::Sub => {
                        let sign = if *op == Elementwise::Add { 1.0 } else { -1.0 };
                        add_into(slot(adj, a, g.len()), g, 1.0);
                        add_into(slot(adj, b, g.len()), g, sign);
                    }
                    Elementwise::Mul => {
                        let (ad, bd) = (self.data(a), self.data(b));
                        {
                            let ga = slot(adj, a, g.len());
                            for i in 0..g.len() {
                                ga[i] += g[i] * bd[i];
                            }
                        }
                        let gb = slot(adj, b, g.len());
                        for i in 0..g.len() {
                            gb[i] += g[i] * ad[i];
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::Scale { x, factor } => add_into(slot(adj, *x, g.len()), g, *factor),
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let width = a_inner + b_inner;
                {
                    let ga = slot(adj, *a, outer * a_inner);
                    for o in 0..*outer {
                        add_into(
                            &mut ga[o * a_inner..(o + 1) * a_inner],
                            &g[o * width..o * width + a_inner],
                            1.0,
                        );
                    }
                }
                let gb = slot(adj, *b, outer * b_inner);
                for o in 0..*outer {
                    add_into(
                        &mut gb[o * b_inner..(o + 1) * b_inner],
                        &g[o * width + a_inner..(o + 1) * width],
                        1.0,
                    );
                }
            }
            Op::Softmax { x, mask } => {
                let y = node.value.data();
                let inner: f64 = (0..y.len()).filter(|&i| mask[i]).map(|i| y[i] * g[i]).sum();
                let gx = slot(adj, *x, y.len());
                for i in 0..y.len() {
                    if mask[i] {
                        gx[i] += y[i] * (g[i] - inner);
                    }
                }
            }
            Op::LogSoftmax { x, mask } => {
                let y = node.value.data();
                let total: f64 = (0..y.len()).filter(|&i| mask[i]).map(|i| g[i]).sum();
                let gx = slot(adj, *x, y.len());
                for i in 0..y.len() {
                    if mask[i] {
                        gx[i] += g[i] - math::exp(y[i]) * total;
                    }
                }
            }
            Op::Dot { a, b } => {
                let (a, b) = (*a, *b);
                let (ad, bd) = (self.data(a), self.data(b));
                add_into(slot(adj, a, bd.len()), bd, g[0]);
                add_into(slot(adj, b, ad.len()), ad, g[0]);
            }
            Op::Sum { x } => {
                let gx = slot(adj, *x, self.value(*x).numel());
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Pick { x, index } => {
                let gx = slot(adj, *x, self.value(*x).numel());
                gx[*index] += g[0];
            }
            Op::Stack { items } => {
                for (i, item) in items.iter().enumerate() {
                    slot(adj, *item, 1)[0] += g[i];
                }
            }
            Op::WeightedSum { weights, items } => {
                for (j, &item) in items.iter().enumerate() {
                    let item_data = self.data(item);
                    let gw: f64 = item_data.iter().zip(g).map(|(x, y)| x * y).sum();
                    slot(adj, *weights, items.len())[j] += gw;
                    let wj = self.data(*weights)[j];
                    add_into(slot(adj, item, g.len()), g, wj);
                }
            }
            Op::Row { table, row } => {
                let cols = self.value(*table).cols();
                let gt = slot(adj, *table, self.value(*table).numel());
                add_into(&mut gt[row * cols..(row + 1) * cols], g, 1.0);
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// Max-subtracted softmax over the unmasked positions of `x`.
pub fn masked_softmax_values(x: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = masked_max(x, mask)?;
    let mut out: Vec<f64> = x
        .iter()
        .zip(mask)
        .map(|(&v, &keep)| if keep { math::exp(v - max) } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Max-subtracted log-softmax over the unmasked positions of `x`.
pub fn masked_log_softmax_values(x: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = masked_max(x, mask)?;
    let total: f64 = x
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(&v, _)| math::exp(v - max))
        .sum();
    let log_norm = max + math::ln(total);
    Ok(x.iter()
        .zip(mask)
        .map(|(&v, &keep)| if keep { v - log_norm } else { f64::NEG_INFINITY })
        .collect())
}

fn masked_max(x: &[f64], mask: &[bool]) -> Result<f64> {
    x.iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(&v, _)| v)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(Error::InvalidMask)
}
