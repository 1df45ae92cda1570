//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order. Nodes
//! only ever refer to earlier nodes, so the backward pass is a single sweep
//! from the loss towards the leaves. Parameters are borrowed from a
//! [`ParamStore`] rather than copied.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::kernels::{self, sigmoid_scalar, softmax_in_place};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Vec<f64>>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn insert(&mut self, name: String, g: Vec<f64>) {
        self.0.insert(name, g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct LstmCache {
    hidden: usize,
    /// Activated gates per timestep, layout `[i | f | g | o]`.
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
}

enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    ConstSub(Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    MaxPoolTime(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    EmbedBags {
        table: Var,
        bags: Vec<Vec<usize>>,
    },
    Lstm {
        xproj: Var,
        w_hh: Var,
        reverse: bool,
        cache: LstmCache,
    },
    RankingHinge {
        pos: Var,
        neg: Var,
        margin: f64,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation over tensors and borrowed parameters.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamStore>,
    param_vars: BTreeMap<String, Var>,
}

impl<'p> Default for Graph<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters; only constant inputs are available.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: BTreeMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a named parameter. Repeated lookups share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::Contract("graph has no parameter store".into()))?;
        let t = store.get(name)?;
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Param(name.to_string()),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` with `b` a `1 × out` row added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let mut out = kernels::matmul(self.value(x), self.value(w))?;
        let bias = self.value(b);
        let n = out.cols();
        if bias.len() != n {
            return Err(Error::Dimension(format!(
                "linear bias {:?} does not match output width {n}",
                bias.shape()
            )));
        }
        for row in out.values_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias.values()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        kernels::zip_broadcast(ta, tb, what, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn expect_scalar(&self, s: Var, what: &str) -> Result<()> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension(format!(
                "{what}: expected a scalar operand, got {:?}",
                self.value(s).shape()
            )));
        }
        Ok(())
    }

    /// Adds a `1 × 1` tensor to every entry of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.expect_scalar(s, "add_scalar")?;
        let out = kernels::zip_broadcast(self.value(x), self.value(s), "add_scalar", |a, b| a + b)?;
        Ok(self.push(out, Op::AddScalar(x, s), &[x, s]))
    }

    /// Multiplies every entry of `x` by a `1 × 1` tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.expect_scalar(s, "mul_scalar")?;
        let out = kernels::zip_broadcast(self.value(x), self.value(s), "mul_scalar", |a, b| a * b)?;
        Ok(self.push(out, Op::MulScalar(x, s), &[x, s]))
    }

    /// `c - x` entrywise.
    pub fn const_sub(&mut self, c: f64, x: Var) -> Var {
        let out = kernels::map(self.value(x), |v| c - v);
        self.push(out, Op::ConstSub(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = kernels::map(self.value(x), |v| c * v);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = kernels::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = kernels::map(self.value(x), f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = kernels::transpose(self.value(x))?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_cols(&ts)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_rows(&ts)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec()), xs))
    }

    /// Gathers the listed rows, in order. Indices may repeat.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.expect_matrix("select_rows")?;
        if idx.is_empty() {
            return Err(Error::EmptySequence("select_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Dimension(format!("row {i} out of range for {n} rows")));
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), d, out)?;
        Ok(self.push(out, Op::SelectRows(x, idx.to_vec()), &[x]))
    }

    /// Column-wise maximum over rows; backward goes to the first argmax.
    pub fn maxpool_time(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = kernels::maxpool_time(self.value(x))?;
        Ok(self.push(out, Op::MaxPoolTime(x, arg), &[x]))
    }

    /// Column-wise mean over rows, as a `1 × d` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.expect_matrix("mean_rows")?;
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let out = Tensor::matrix(1, d, out)?;
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Looks up one table row per token id. Id 0 is padding and maps to zeros.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let bags: Vec<Vec<usize>> = ids.iter().map(|&i| vec![i]).collect();
        self.embed_bags(table, &bags)
    }

    /// One output row per bag: the mean of the bag's token rows. Padding
    /// tokens contribute zero vectors but still count towards the mean.
    pub fn embed_bags(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = t.expect_matrix("embedding table")?;
        if bags.is_empty() {
            return Err(Error::EmptySequence("embedding lookup of zero tokens".into()));
        }
        let mut out = vec![0.0; bags.len() * d];
        for (r, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::EmptySequence(format!("bag {r} has no tokens")));
            }
            let w = 1.0 / bag.len() as f64;
            let orow = &mut out[r * d..(r + 1) * d];
            for &id in bag {
                if id >= vocab {
                    return Err(Error::Vocab(format!("token id {id} outside vocabulary of {vocab}")));
                }
                if id == 0 {
                    continue;
                }
                for (o, &v) in orow.iter_mut().zip(t.row(id)) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::matrix(bags.len(), d, out)?;
        Ok(self.push(
            out,
            Op::EmbedBags {
                table,
                bags: bags.to_vec(),
            },
            &[table],
        ))
    }

    /// Runs an LSTM recurrence over precomputed input projections.
    ///
    /// `xproj` is `n × 4h` (input projection plus bias, gate layout
    /// `[i | f | g | o]`), `w_hh` is `h × 4h`. State starts at zero. With
    /// `reverse` the sequence is consumed from the last row to the first;
    /// output row `t` is always the hidden state at timestep `t`.
    pub fn lstm(&mut self, xproj: Var, w_hh: Var, reverse: bool) -> Result<Var> {
        let x = self.value(xproj);
        let w = self.value(w_hh);
        let (n, four_h) = x.expect_matrix("lstm input projection")?;
        let (h, w_cols) = w.expect_matrix("lstm recurrent weight")?;
        if four_h != 4 * h || w_cols != four_h {
            return Err(Error::Dimension(format!(
                "lstm shapes disagree: projection {:?}, recurrent weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        if n == 0 {
            return Err(Error::EmptySequence("lstm over zero timesteps".into()));
        }
        let (xv, wv) = (x.values(), w.values());
        let mut gates = vec![0.0; n * four_h];
        let mut cells = vec![0.0; n * h];
        let mut tanh_cells = vec![0.0; n * h];
        let mut out = vec![0.0; n * h];
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut z = vec![0.0; four_h];
        for step in 0..n {
            let t = if reverse { n - 1 - step } else { step };
            z.copy_from_slice(&xv[t * four_h..(t + 1) * four_h]);
            for (p, &hp) in h_prev.iter().enumerate() {
                if hp != 0.0 {
                    for (zj, &wj) in z.iter_mut().zip(&wv[p * four_h..(p + 1) * four_h]) {
                        *zj += hp * wj;
                    }
                }
            }
            let g = &mut gates[t * four_h..(t + 1) * four_h];
            for j in 0..h {
                let i = sigmoid_scalar(z[j]);
                let f = sigmoid_scalar(z[h + j]);
                let gg = z[2 * h + j].tanh();
                let o = sigmoid_scalar(z[3 * h + j]);
                g[j] = i;
                g[h + j] = f;
                g[2 * h + j] = gg;
                g[3 * h + j] = o;
                let c = f * c_prev[j] + i * gg;
                let tc = c.tanh();
                cells[t * h + j] = c;
                tanh_cells[t * h + j] = tc;
                out[t * h + j] = o * tc;
            }
            h_prev.copy_from_slice(&out[t * h..(t + 1) * h]);
            c_prev.copy_from_slice(&cells[t * h..(t + 1) * h]);
        }
        let out = Tensor::matrix(n, h, out)?;
        Ok(self.push(
            out,
            Op::Lstm {
                xproj,
                w_hh,
                reverse,
                cache: LstmCache {
                    hidden: h,
                    gates,
                    cells,
                    tanh_cells,
                },
            },
            &[xproj, w_hh],
        ))
    }

    /// Mean pairwise hinge `max(0, margin + neg_j - pos_i)` over every
    /// (positive, negative) pair.
    pub fn ranking_hinge(&mut self, pos: Var, neg: Var, margin: f64) -> Result<Var> {
        let (p, n) = (self.value(pos), self.value(neg));
        if p.is_empty() || n.is_empty() {
            return Err(Error::Contract("ranking loss needs positives and negatives".into()));
        }
        let mut total = 0.0;
        for &pv in p.values() {
            for &nv in n.values() {
                total += (margin + nv - pv).max(0.0);
            }
        }
        let loss = total / (p.len() * n.len()) as f64;
        Ok(self.push(Tensor::scalar(loss), Op::RankingHinge { pos, neg, margin }, &[pos, neg]))
    }

    /// Negative log-softmax probability of `target` over a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = self.value(logits);
        if target >= l.len() {
            return Err(Error::Contract(format!(
                "target {target} out of range for {} classes",
                l.len()
            )));
        }
        let mut probs = l.values().to_vec();
        softmax_in_place(&mut probs);
        let max = l.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.values().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - l.values()[target];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, target, probs },
            &[logits],
        ))
    }

    /// Back-propagates from a scalar loss and returns the gradient of every
    /// parameter the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if let Op::Param(name) = &node.op {
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.values();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads),
            Op::Linear { x, w, b } => {
                self.backprop_matmul(*x, *w, g, grads);
                let n = self.value(*b).len();
                self.acc(grads, *b, |db| {
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                self.acc(grads, *a, |d| {
                    for ((d, &gv), &bv) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * bv;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &gv), &av) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * av;
                    }
                });
            }
            Op::AddScalar(x, s) => {
                self.acc(grads, *x, |d| add_into(d, g));
                self.acc(grads, *s, |d| d[0] += g.iter().sum::<f64>());
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).values()[0];
                let xv = self.value(*x).values();
                self.acc(grads, *x, |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv * sv;
                    }
                });
                self.acc(grads, *s, |d| {
                    d[0] += g.iter().zip(xv).map(|(&gv, &xv)| gv * xv).sum::<f64>();
                });
            }
            Op::ConstSub(x) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &v)| *d -= v));
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &v)| *d += c * v));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).values();
                self.acc(grads, *x, |d| {
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(xv) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => self.acc(grads, *x, |d| {
                for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }),
            Op::Tanh(x) => self.acc(grads, *x, |d| {
                for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }),
            Op::SoftmaxRows(x) => {
                let n = node.value.cols();
                self.acc(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                self.acc(grads, *x, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    self.acc(grads, x, |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    self.acc(grads, x, |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SelectRows(x, idx) => {
                let d_cols = node.value.cols();
                self.acc(grads, *x, |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * d_cols..(i + 1) * d_cols], &g[r * d_cols..(r + 1) * d_cols]);
                    }
                });
            }
            Op::MaxPoolTime(x, arg) => {
                let d_cols = arg.len();
                self.acc(grads, *x, |d| {
                    for (j, &t) in arg.iter().enumerate() {
                        d[t * d_cols + j] += g[j];
                    }
                });
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).rows() as f64;
                let d_cols = node.value.cols();
                self.acc(grads, *x, |d| {
                    for drow in d.chunks_mut(d_cols) {
                        for (dv, &gv) in drow.iter_mut().zip(g) {
                            *dv += gv / n;
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::EmbedBags { table, bags } => {
                let d_cols = node.value.cols();
                self.acc(grads, *table, |d| {
                    for (r, bag) in bags.iter().enumerate() {
                        let w = 1.0 / bag.len() as f64;
                        let grow = &g[r * d_cols..(r + 1) * d_cols];
                        for &id in bag.iter().filter(|&&id| id != 0) {
                            for (dv, &gv) in d[id * d_cols..(id + 1) * d_cols].iter_mut().zip(grow) {
                                *dv += w * gv;
                            }
                        }
                    }
                });
            }
            Op::Lstm {
                xproj,
                w_hh,
                reverse,
                cache,
            } => self.backprop_lstm(*xproj, *w_hh, *reverse, cache, y, g, grads),
            Op::RankingHinge { pos, neg, margin } => {
                let (pv, nv) = (self.value(*pos).values(), self.value(*neg).values());
                let w = g[0] / (pv.len() * nv.len()) as f64;
                let mut dp = vec![0.0; pv.len()];
                let mut dn = vec![0.0; nv.len()];
                for (i, &p) in pv.iter().enumerate() {
                    for (j, &n) in nv.iter().enumerate() {
                        if margin + n - p > 0.0 {
                            dp[i] -= w;
                            dn[j] += w;
                        }
                    }
                }
                self.acc(grads, *pos, |d| add_into(d, &dp));
                self.acc(grads, *neg, |d| add_into(d, &dn));
            }
            Op::CrossEntropy { logits, target, probs } => self.acc(grads, *logits, |d| {
                for (k, (dv, &p)) in d.iter_mut().zip(probs).enumerate() {
                    let onehot = if k == *target { 1.0 } else { 0.0 };
                    *dv += g[0] * (p - onehot);
                }
            }),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let n = tb.cols();
        let (av, bv) = (ta.values(), tb.values());
        // dA = G · Bᵀ
        self.acc(grads, a, |da| {
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bv[p * n..(p + 1) * n];
                    da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        });
        // dB = Aᵀ · G
        self.acc(grads, b, |db| {
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                        *d += aip * gv;
                    }
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_lstm(
        &self,
        xproj: Var,
        w_hh: Var,
        reverse: bool,
        cache: &LstmCache,
        hs: &[f64],
        g_out: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let h = cache.hidden;
        let four_h = 4 * h;
        let n = hs.len() / h;
        let wv = self.value(w_hh).values();
        let mut dx = vec![0.0; n * four_h];
        let mut dw = vec![0.0; h * four_h];
        let mut dh_rec = vec![0.0; h];
        let mut dc_rec = vec![0.0; h];
        let mut dz = vec![0.0; four_h];
        for step in (0..n).rev() {
            let t = if reverse { n - 1 - step } else { step };
            let prev = if step == 0 {
                None
            } else if reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let gates = &cache.gates[t * four_h..(t + 1) * four_h];
            for j in 0..h {
                let (i, f, gg, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let tc = cache.tanh_cells[t * h + j];
                let c_prev = prev.map_or(0.0, |p| cache.cells[p * h + j]);
                let dh = g_out[t * h + j] + dh_rec[j];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_rec[j];
                dz[j] = dc * gg * i * (1.0 - i);
                dz[h + j] = dc * c_prev * f * (1.0 - f);
                dz[2 * h + j] = dc * i * (1.0 - gg * gg);
                dz[3 * h + j] = d_o * o * (1.0 - o);
                dc_rec[j] = dc * f;
            }
            dx[t * four_h..(t + 1) * four_h].copy_from_slice(&dz);
            match prev {
                Some(p) => {
                    let h_prev = &hs[p * h..(p + 1) * h];
                    for (q, &hq) in h_prev.iter().enumerate() {
                        let wrow = &wv[q * four_h..(q + 1) * four_h];
                        dh_rec[q] = wrow.iter().zip(&dz).map(|(a, b)| a * b).sum();
                        for (d, &zv) in dw[q * four_h..(q + 1) * four_h].iter_mut().zip(&dz) {
                            *d += hq * zv;
                        }
                    }
                }
                None => dh_rec.iter_mut().for_each(|v| *v = 0.0),
            }
        }
        self.acc(grads, xproj, |d| add_into(d, &dx));
        self.acc(grads, w_hh, |d| add_into(d, &dw));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
