//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape once in reverse and accumulates adjoints into the inputs
//! that require gradients. Observations and other data enter as constants
//! and never receive adjoints.

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::{axis_split, log_softmax_into, Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SumColGroups(Var, usize),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Maximum(Var, Var),
    GatherCols(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    EntropyRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| Error::shape(op, format!("expected a matrix, got {:?}", t.shape())))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Data that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Constant, false)
    }

    /// Unnamed differentiable input, used for gradient checks on inputs.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// Loads a named parameter from the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
            .clone();
        Ok(self.push_unchecked(t, Op::Param(name.to_string()), true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg, "matmul")
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Minimum(a, b), "minimum", |x, y| if y < x { y } else { x })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Maximum(a, b), "maximum", |x, y| if y > x { y } else { x })
    }

    /// `x[B×n] + bias[n]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddRow(x, bias), rg, "add_row")
    }

    /// `x[B×n] ⊙ c[B×1]`, c broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (b, n) = dims2(self.value(x), "mul_col")?;
        let (cb, cn) = dims2(self.value(c), "mul_col")?;
        if cb != b || cn != 1 {
            return Err(Error::shape("mul_col", format!("[{b}x{n}] * [{cb}x{cn}]")));
        }
        let xs = self.value(x).data();
        let cs = self.value(c).data();
        let mut out = vec![0.0; b * n];
        for r in 0..b {
            for j in 0..n {
                out[r * n + j] = xs[r * n + j] * cs[r];
            }
        }
        let rg = self.rg(x) || self.rg(c);
        self.push(Tensor::from_parts(vec![b, n], out), Op::MulCol(x, c), rg, "mul_col")
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        self.push(value, op, rg, name)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, s), "scale", |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), "add_scalar", |v| v + s)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), "relu", |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), "exp", f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Ln(x), "ln", f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), "square", |v| v * v)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::contract(format!("clamp bounds {lo} > {hi}")));
        }
        self.map(x, Op::Clamp(x, lo, hi), "clamp", |v| v.clamp(lo, hi))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x, axis), rg, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let mut out = vec![0.0; t.len()];
        log_softmax_into(t.data(), &mut out, outer, len, inner);
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x, axis), rg, "log_softmax")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    /// Row sums: `[B×n] -> [B×1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (b, n) = dims2(self.value(x), "sum_cols")?;
        let data = self.value(x).data().chunks(n).map(|r| r.iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![b, 1], data), Op::SumCols(x), rg, "sum_cols")
    }

    /// Sums each run of `group` consecutive columns: `[B×(n·g)] -> [B×n]`.
    pub fn sum_col_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (b, cols) = dims2(self.value(x), "sum_col_groups")?;
        if group == 0 || cols % group != 0 {
            return Err(Error::shape("sum_col_groups", format!("{cols} columns, group {group}")));
        }
        let n = cols / group;
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * n];
        for r in 0..b {
            for j in 0..n {
                out[r * n + j] = xs[r * cols + j * group..r * cols + (j + 1) * group].iter().sum();
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![b, n], out), Op::SumColGroups(x, group), rg, "sum_col_groups")
    }

    /// Picks `x[r, idx[r]]` per row: `[B×n] -> [B×1]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (b, n) = dims2(self.value(x), "gather_cols")?;
        if idx.len() != b || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_cols", format!("{} indices for [{b}x{n}]", idx.len())));
        }
        let xs = self.value(x).data();
        let data = idx.iter().enumerate().map(|(r, &i)| xs[r * n + i]).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![b, 1], data), Op::GatherCols(x, idx.to_vec()), rg, "gather_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (b, n) = dims2(self.value(x), "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n}")));
        }
        let w = end - start;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(b * w);
        for r in 0..b {
            out.extend_from_slice(&xs[r * n + start..r * n + end]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![b, w], out), Op::SliceCols(x, start, end), rg, "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (b, n) = dims2(self.value(x), "slice_rows")?;
        if start >= end || end > b {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {b}")));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![end - start, n], out), Op::SliceRows(x, start, end), rg, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (b, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pb, pn) = dims2(self.value(p), "concat_cols")?;
            if pb != b {
                return Err(Error::shape("concat_cols", format!("row counts {pb} vs {b}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total);
        for r in 0..b {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_parts(vec![b, total], out), Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, n) = dims2(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pb, pn) = dims2(self.value(p), "concat_rows")?;
            if pn != n {
                return Err(Error::shape("concat_rows", format!("column counts {pn} vs {n}")));
            }
            rows += pb;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_parts(vec![rows, n], out), Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg, "transpose")
    }

    /// Shannon entropy `-Σ p ln p` of each row of a probability matrix,
    /// with `0 ln 0 = 0`: `[B×n] -> [B×1]`.
    pub fn entropy_rows(&mut self, p: Var) -> Result<Var> {
        let (b, n) = dims2(self.value(p), "entropy_rows")?;
        let data = self
            .value(p)
            .data()
            .chunks(n)
            .map(|row| -row.iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum::<f64>())
            .collect();
        let rg = self.rg(p);
        self.push(Tensor::from_parts(vec![b, 1], data), Op::EntropyRows(p), rg, "entropy_rows")
    }

    /// Adjoints of a scalar `loss` with respect to every named parameter in
    /// `store`. Parameters the loss does not reach get zero gradients and are
    /// left out of [`Gradients::reached`].
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let adj = self.propagate(loss)?;
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut reached = BTreeSet::new();
        for (node, g) in self.nodes.iter().zip(adj) {
            if let (Op::Param(name), Some(g)) = (&node.op, g) {
                if !store.contains(name) {
                    return Err(Error::contract(format!("parameter `{name}` not in store")));
                }
                reached.insert(name.clone());
                match grads.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name.clone(), g);
                    }
                }
            }
        }
        let mut full = BTreeMap::new();
        for (name, value) in store.iter() {
            let t = match grads.remove(name) {
                Some(g) => Tensor::from_parts(value.shape().to_vec(), g),
                None => Tensor::zeros(value.shape()),
            };
            full.insert(name.to_string(), t);
        }
        Ok(Gradients::new(full, reached))
    }

    /// Adjoints of a scalar `loss` with respect to arbitrary nodes.
    pub fn grad_wrt(&self, loss: Var, vars: &[Var]) -> Result<Vec<Tensor>> {
        let adj = self.propagate(loss)?;
        Ok(vars
            .iter()
            .map(|v| {
                let shape = self.value(*v).shape().to_vec();
                match &adj[v.0] {
                    Some(g) => Tensor::from_parts(shape, g.clone()),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn propagate(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss is not on this tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.step_back(&node.op, &node.value, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn step_back(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Buffer for `v`'s adjoint, allocated on first use.
        fn slot(adj: &mut [Option<Vec<f64>>], len: usize, v: Var) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if self.rg(*a) {
                    let da = slot(adj, m * k, *a);
                    gemm_nt(m, n, k, g, self.value(*b).data(), da, true);
                }
                if self.rg(*b) {
                    let db = slot(adj, k * n, *b);
                    gemm_tn(m, k, n, self.value(*a).data(), g, db, true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    slot(adj, g.len(), *a).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if self.rg(*b) {
                    slot(adj, g.len(), *b).iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    slot(adj, g.len(), *a)
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(d, (&x, &y))| *d += x * y);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    slot(adj, g.len(), *b)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (&x, &y))| *d += x * y);
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let is_min = matches!(op, Op::Minimum(..));
                // ties route to the first argument, matching the forward pick
                let picks_b: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| if is_min { y < x } else { y > x })
                    .collect();
                if self.rg(*a) {
                    let da = slot(adj, g.len(), *a);
                    for ((d, &x), &pb) in da.iter_mut().zip(g).zip(&picks_b) {
                        if !pb {
                            *d += x;
                        }
                    }
                }
                if self.rg(*b) {
                    let db = slot(adj, g.len(), *b);
                    for ((d, &x), &pb) in db.iter_mut().zip(g).zip(&picks_b) {
                        if pb {
                            *d += x;
                        }
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let n = self.value(*bias).len();
                if self.rg(*x) {
                    slot(adj, g.len(), *x).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if self.rg(*bias) {
                    let db = slot(adj, n, *bias);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::MulCol(x, c) => {
                let (b, n) = self.value(*x).dims2().unwrap();
                let cs = self.value(*c).data();
                if self.rg(*x) {
                    let dx = slot(adj, b * n, *x);
                    for r in 0..b {
                        for j in 0..n {
                            dx[r * n + j] += g[r * n + j] * cs[r];
                        }
                    }
                }
                if self.rg(*c) {
                    let xs = self.value(*x).data();
                    let dc = slot(adj, b, *c);
                    for r in 0..b {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[r * n + j] * xs[r * n + j];
                        }
                        dc[r] += s;
                    }
                }
            }
            Op::Scale(x, s) => {
                slot(adj, g.len(), *x).iter_mut().zip(g).for_each(|(d, &v)| *d += v * s);
            }
            Op::AddScalar(x) => {
                slot(adj, g.len(), *x).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let dx = slot(adj, g.len(), *x);
                for ((d, &v), &xi) in dx.iter_mut().zip(g).zip(xs) {
                    if xi > 0.0 {
                        *d += v;
                    }
                }
            }
            Op::Exp(x) => {
                let ys = out.data();
                slot(adj, g.len(), *x)
                    .iter_mut()
                    .zip(g.iter().zip(ys))
                    .for_each(|(d, (&v, &y))| *d += v * y);
            }
            Op::Ln(x) => {
                let xs = self.value(*x).data();
                slot(adj, g.len(), *x)
                    .iter_mut()
                    .zip(g.iter().zip(xs))
                    .for_each(|(d, (&v, &xi))| *d += v / xi);
            }
            Op::Square(x) => {
                let xs = self.value(*x).data();
                slot(adj, g.len(), *x)
                    .iter_mut()
                    .zip(g.iter().zip(xs))
                    .for_each(|(d, (&v, &xi))| *d += 2.0 * v * xi);
            }
            Op::Clamp(x, lo, hi) => {
                let xs = self.value(*x).data();
                let dx = slot(adj, g.len(), *x);
                for ((d, &v), &xi) in dx.iter_mut().zip(g).zip(xs) {
                    if xi >= *lo && xi <= *hi {
                        *d += v;
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis).unwrap();
                let ys = out.data();
                let dx = slot(adj, g.len(), *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * ys[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] += ys[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis).unwrap();
                let ys = out.data();
                let dx = slot(adj, g.len(), *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let total: f64 = (0..len).map(|k| g[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] += g[idx(k)] - ys[idx(k)].exp() * total;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                slot(adj, n, *x).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let share = g[0] / n as f64;
                slot(adj, n, *x).iter_mut().for_each(|d| *d += share);
            }
            Op::SumCols(x) => {
                let (b, n) = self.value(*x).dims2().unwrap();
                let dx = slot(adj, b * n, *x);
                for r in 0..b {
                    dx[r * n..(r + 1) * n].iter_mut().for_each(|d| *d += g[r]);
                }
            }
            Op::SumColGroups(x, group) => {
                let (b, cols) = self.value(*x).dims2().unwrap();
                let n = cols / group;
                let dx = slot(adj, b * cols, *x);
                for r in 0..b {
                    for j in 0..n {
                        let gv = g[r * n + j];
                        dx[r * cols + j * group..r * cols + (j + 1) * group]
                            .iter_mut()
                            .for_each(|d| *d += gv);
                    }
                }
            }
            Op::GatherCols(x, idx) => {
                let (b, n) = self.value(*x).dims2().unwrap();
                let dx = slot(adj, b * n, *x);
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * n + i] += g[r];
                }
            }
            Op::SliceCols(x, start, end) => {
                let (b, n) = self.value(*x).dims2().unwrap();
                let w = end - start;
                let dx = slot(adj, b * n, *x);
                for r in 0..b {
                    dx[r * n + start..r * n + end]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(d, &v)| *d += v);
                }
            }
            Op::SliceRows(x, start, end) => {
                let (b, n) = self.value(*x).dims2().unwrap();
                let dx = slot(adj, b * n, *x);
                dx[start * n..end * n].iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            Op::ConcatCols(parts) => {
                let b = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.rg(p) {
                        let dp = slot(adj, b * w, p);
                        for r in 0..b {
                            dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                                .for_each(|(d, &v)| *d += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        slot(adj, len, p)
                            .iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, &v)| *d += v);
                    }
                    offset += len;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let dx = slot(adj, r * c, *x);
                // out is c×r
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::EntropyRows(p) => {
                let (b, n) = self.value(*p).dims2().unwrap();
                let ps = self.value(*p).data();
                let dp = slot(adj, b * n, *p);
                for r in 0..b {
                    for j in 0..n {
                        let q = ps[r * n + j];
                        if q > 0.0 {
                            dp[r * n + j] -= g[r] * (q.ln() + 1.0);
                        }
                    }
                }
            }
        }
    }
}
