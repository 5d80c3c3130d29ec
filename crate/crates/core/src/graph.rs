//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs; ids therefore increase in creation order and the tape is
//! acyclic by construction. [`Graph::backward`] walks ids downward from the
//! loss, visiting each node once.
//!
//! Gradients *accumulate*: a second `backward` without [`Graph::zero_grads`]
//! adds onto the grads of the first.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.05 }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    /// Saved: row softmax.
    LogSumExpRows(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    /// Saved: row softmax and labels. Output is the mean CE.
    SoftmaxCrossEntropy(Var, Vec<f64>, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if `backward` reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// `x[n×m] + bias[m]`, bias broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.shape() != [m] {
            return Err(Error::shape("add_row_bias", self.value(x).shape(), b.shape()));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, rg, Op::AddRowBias(x, bias)))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = f(*o, bv);
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v > 0.0 { *v } else { slope * *v });
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = libm::tanh(*v));
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Tanh(a))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::LeakyRelu { slope } => self.leaky_relu(a, slope),
            Activation::Tanh => self.tanh(a),
        }
    }

    /// Row-wise `log Σ_j exp(t[i, j])` of an `n×K` matrix, giving `[n]`.
    pub fn log_sum_exp_rows(&mut self, t: Var) -> Result<Var> {
        let (n, k) = self.value(t).dims2()?;
        if k == 0 {
            return Err(Error::contract("log_sum_exp_rows", "empty class axis"));
        }
        let src = self.value(t).data();
        let mut out = Vec::with_capacity(n);
        let mut soft = vec![0.0; n * k];
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            out.push(tensor::log_sum_exp(row));
            tensor::softmax_into(row, &mut soft[i * k..(i + 1) * k]);
        }
        let rg = self.rg(&[t]);
        Ok(self.push(Tensor::new(&[n], out)?, rg, Op::LogSumExpRows(t, soft)))
    }

    /// Picks `t[i, index[i]]` from each row, giving `[n]`.
    pub fn gather(&mut self, t: Var, index: &[usize]) -> Result<Var> {
        let (n, k) = self.value(t).dims2()?;
        if index.len() != n {
            return Err(Error::shape("gather", self.value(t).shape(), &[index.len()]));
        }
        let src = self.value(t).data();
        let mut out = Vec::with_capacity(n);
        for (i, &j) in index.iter().enumerate() {
            if j >= k {
                return Err(Error::Index {
                    what: "gather",
                    index: j,
                    bound: k,
                });
            }
            out.push(src[i * k + j]);
        }
        let rg = self.rg(&[t]);
        Ok(self.push(Tensor::new(&[n], out)?, rg, Op::Gather(t, index.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::contract("mean", "empty tensor"));
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean(a)))
    }

    /// Mean softmax cross-entropy of `logits[n×K]` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                self.value(logits).shape(),
                &[labels.len()],
            ));
        }
        if n == 0 || k == 0 {
            return Err(Error::contract("softmax_cross_entropy", "empty batch or class axis"));
        }
        let src = self.value(logits).data();
        let mut soft = vec![0.0; n * k];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Index {
                    what: "softmax_cross_entropy",
                    index: y,
                    bound: k,
                });
            }
            let row = &src[i * k..(i + 1) * k];
            total += tensor::log_sum_exp(row) - row[y];
            tensor::softmax_into(row, &mut soft[i * k..(i + 1) * k]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            rg,
            Op::SoftmaxCrossEntropy(logits, soft, labels.to_vec()),
        ))
    }

    /// Back-propagates from a scalar `loss`, adding into the grads of every
    /// node on the path that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                alloc::format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Per-pass adjoints; persistent grads are only touched at the end.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(&node.op, &node.value, &g, &mut adj);
            let slot = &mut self.nodes[id].grad;
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with {
            ($v:expr, |$buf:ident| $body:block) => {
                accumulate(nodes, adj, $v, |$buf: &mut [f64]| $body)
            };
        }
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("matmul lhs is 2-d");
                let (_, n) = nodes[b.0].value.dims2().expect("matmul rhs is 2-d");
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                with!(*a, |ga| {
                    tensor::matmul_bt_into(g, bv, ga, m, n, k);
                });
                with!(*b, |gb| {
                    tensor::matmul_at_into(av, g, gb, m, k, n);
                });
            }
            Op::AddRowBias(x, b) => {
                with!(*x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                });
                let m = nodes[b.0].value.numel();
                with!(*b, |gb| {
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::Add(a, b) => {
                with!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, v)| *x += v);
                });
                with!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, v)| *x += v);
                });
            }
            Op::Sub(a, b) => {
                with!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, v)| *x += v);
                });
                with!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, v)| *x -= v);
                });
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                with!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                with!(*b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                with!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, v)| *x += c * v);
                });
            }
            Op::LeakyRelu(a, slope) => {
                let xv = nodes[a.0].value.data();
                with!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += if xv[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = out.data();
                with!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::LogSumExpRows(t, soft) => {
                let k = soft.len() / g.len().max(1);
                with!(*t, |gt| {
                    for (i, &gi) in g.iter().enumerate() {
                        for j in 0..k {
                            gt[i * k + j] += gi * soft[i * k + j];
                        }
                    }
                });
            }
            Op::Gather(t, index) => {
                let k = nodes[t.0].value.numel() / g.len().max(1);
                with!(*t, |gt| {
                    for (i, &j) in index.iter().enumerate() {
                        gt[i * k + j] += g[i];
                    }
                });
            }
            Op::Sum(a) => {
                with!(*a, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                });
            }
            Op::Mean(a) => {
                let s = g[0] / nodes[a.0].value.numel() as f64;
                with!(*a, |ga| {
                    ga.iter_mut().for_each(|x| *x += s);
                });
            }
            Op::SoftmaxCrossEntropy(logits, soft, labels) => {
                with!(*logits, |gl| {
                    let n = labels.len();
                    let k = soft.len() / n;
                    let s = g[0] / n as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[i * k + j] += s * (soft[i * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Runs `f` on the adjoint buffer of `v` (allocating it on first use) when
/// `v` needs a gradient.
fn accumulate(nodes: &[Node], adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return;
    }
    let mut buf = adj[v.0].take().unwrap_or_else(|| vec![0.0; n.value.numel()]);
    f(&mut buf);
    adj[v.0] = Some(buf);
}
