//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every node's value is computed eagerly when it is recorded. Gradients are
//! built *on the tape*: the vector-Jacobian product of each op is expressed
//! with other tape ops, so a gradient node can itself be differentiated. The
//! Eikonal term uses this to penalize `|grad s|` and still reach the network
//! weights through a second reverse pass.
//!
//! Shapes are never broadcast implicitly; use the explicit `broadcast_*` ops.

use std::sync::Arc;

use super::mat::Mat;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
#[allow(dead_code)]
enum Op {
    Const,
    Input,
    Param(usize),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Softplus(Var, f64),
    Relu(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Concat(Box<[Var]>),
    SliceCols(Var, usize, usize),
    PadCols(Var, usize, usize),
    SumAll(Var),
    BroadcastScalar(Var, usize, usize),
    SumCols(Var),
    BroadcastCols(Var, usize),
    SumRows(Var),
    BroadcastRows(Var, usize),
    Reshape(Var, usize, usize),
    /// Exclusive running sum along each row; `true` runs right-to-left.
    CumSumCols(Var, bool),
    GatherRows(Var, Arc<[usize]>),
    ScatterRows(Var, Arc<[usize]>, usize),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Const | Input | Param(_) => Vec::new(),
            MatMul { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Concat(parts) => parts.to_vec(),
            Scale(a, _)
            | AddScalar(a, _)
            | Sin(a)
            | Cos(a)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | Sigmoid(a)
            | Softplus(a, _)
            | Relu(a)
            | Abs(a)
            | Clamp(a, _, _)
            | SliceCols(a, _, _)
            | PadCols(a, _, _)
            | SumAll(a)
            | BroadcastScalar(a, _, _)
            | SumCols(a)
            | BroadcastCols(a, _)
            | SumRows(a)
            | BroadcastRows(a, _)
            | Reshape(a, _, _)
            | CumSumCols(a, _)
            | GatherRows(a, _)
            | ScatterRows(a, _, _) => vec![*a],
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradient of a scalar root with respect to one bound parameter group.
#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub group: usize,
    pub grad: Mat,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn v(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    // ----- leaves -----

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    /// A leaf that gradients may be taken with respect to (e.g. sample coordinates).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    /// A trainable leaf tied to parameter group `group`.
    pub fn param(&mut self, group: usize, value: Mat) -> Var {
        self.push(value, Op::Param(group))
    }

    // ----- binary -----

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = Mat::matmul(self.v(a), self.v(b), ta, tb);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.v(a).zip(self.v(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.v(a).zip(self.v(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.v(a).zip(self.v(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.v(a).zip(self.v(b), |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    // ----- unary -----

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.v(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.v(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a, c))
    }

    /// `c - a`
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.v(a).map(f64::sin);
        self.push(value, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.v(a).map(f64::cos);
        self.push(value, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.v(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.v(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.v(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.v(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// `ln(1 + exp(beta x)) / beta`
    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        let value = self.v(a).map(|x| softplus(x, beta));
        self.push(value, Op::Softplus(a, beta))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.v(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.v(a).map(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.v(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    // ----- shape -----

    /// Column-wise concatenation of equally tall nodes.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.v(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.v(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.v(p);
            assert_eq!(m.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        self.push(out, Op::Concat(parts.into()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.v(a);
        assert!(start + len <= m.cols, "slice out of range");
        let mut out = Mat::zeros(m.rows, len);
        for r in 0..m.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start, len))
    }

    /// Places `a` at column `start` of a zero matrix `total` columns wide.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let m = self.v(a);
        assert!(start + m.cols <= total, "pad out of range");
        let mut out = Mat::zeros(m.rows, total);
        for r in 0..m.rows {
            out.data[r * total + start..r * total + start + m.cols].copy_from_slice(m.row(r));
        }
        self.push(out, Op::PadCols(a, start, total))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.v(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = Mat::filled(rows, cols, self.v(a).item());
        self.push(value, Op::BroadcastScalar(a, rows, cols))
    }

    /// Sums each row, giving a column vector.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.v(a);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        let value = Mat::from_vec(m.rows, 1, data);
        self.push(value, Op::SumCols(a))
    }

    /// Repeats a column vector across `cols` columns.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let m = self.v(a);
        assert_eq!(m.cols, 1, "broadcast_cols expects a column vector");
        let data = m
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, cols))
            .collect();
        let value = Mat::from_vec(m.rows, cols, data);
        self.push(value, Op::BroadcastCols(a, cols))
    }

    /// Sums each column, giving a row vector.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.v(a);
        let mut out = Mat::zeros(1, m.cols);
        for r in 0..m.rows {
            for (o, v) in out.data.iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    /// Repeats a row vector `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let m = self.v(a);
        assert_eq!(m.rows, 1, "broadcast_rows expects a row vector");
        let mut data = Vec::with_capacity(rows * m.cols);
        for _ in 0..rows {
            data.extend_from_slice(&m.data);
        }
        let value = Mat::from_vec(rows, m.cols, data);
        self.push(value, Op::BroadcastRows(a, rows))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let m = self.v(a);
        assert_eq!(m.len(), rows * cols, "reshape changes element count");
        let value = Mat::from_vec(rows, cols, m.data.clone());
        self.push(value, Op::Reshape(a, rows, cols))
    }

    /// Exclusive prefix sum along each row (`reverse` accumulates from the right).
    pub fn cumsum_cols(&mut self, a: Var, reverse: bool) -> Var {
        let m = self.v(a);
        let mut out = Mat::zeros(m.rows, m.cols);
        for r in 0..m.rows {
            let src = m.row(r);
            let dst = &mut out.data[r * m.cols..(r + 1) * m.cols];
            let mut acc = 0.0;
            if reverse {
                for c in (0..m.cols).rev() {
                    dst[c] = acc;
                    acc += src[c];
                }
            } else {
                for c in 0..m.cols {
                    dst[c] = acc;
                    acc += src[c];
                }
            }
        }
        self.push(out, Op::CumSumCols(a, reverse))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let m = self.v(a);
        let mut out = Mat::zeros(idx.len(), m.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * m.cols..(r + 1) * m.cols].copy_from_slice(m.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Adds row `r` of `a` into row `idx[r]` of a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, a: Var, idx: Arc<[usize]>, rows: usize) -> Var {
        let m = self.v(a);
        assert_eq!(m.rows, idx.len(), "scatter index length mismatch");
        let mut out = Mat::zeros(rows, m.cols);
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in out.data[i * m.cols..(i + 1) * m.cols]
                .iter_mut()
                .zip(m.row(r))
            {
                *o += v;
            }
        }
        self.push(out, Op::ScatterRows(a, idx, rows))
    }

    // ----- conveniences -----

    /// `x W + b` for a row-batch `x`, weight `in x out` and bias `1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        let rows = self.v(x).rows;
        let bb = self.broadcast_rows(b, rows);
        self.add(xw, bb)
    }

    pub fn ones_like(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.constant(Mat::filled(r, c, 1.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.v(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ----- differentiation -----

    /// Builds `d(sum(seed * output)) / d(wrt)` as new tape nodes.
    ///
    /// `seed` defaults to ones shaped like `output`. Entries are `None` for
    /// `wrt` nodes that `output` does not depend on. The returned nodes are
    /// ordinary tape nodes and may be differentiated again.
    pub fn grad(&mut self, output: Var, seed: Option<Var>, wrt: &[Var]) -> Vec<Option<Var>> {
        let end = output.0 + 1;
        let mut depends = vec![false; end];
        for w in wrt {
            if w.0 < end {
                depends[w.0] = true;
            }
        }
        for i in 0..end {
            if !depends[i] && self.nodes[i].op.parents().iter().any(|p| depends[p.0]) {
                depends[i] = true;
            }
        }
        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if depends[output.0] {
            let seed = seed.unwrap_or_else(|| self.ones_like(output));
            assert_eq!(self.shape(seed), self.shape(output), "seed shape mismatch");
            adjoint[output.0] = Some(seed);
        }
        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !depends[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, contribution) in self.vjp(Var(i), &op, g, &depends) {
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    Some(prev) => self.add(prev, contribution),
                    None => contribution,
                });
            }
        }
        wrt.iter()
            .map(|w| if w.0 < end { adjoint[w.0] } else { None })
            .collect()
    }

    /// Gradients of a scalar root with respect to every parameter leaf.
    pub fn backward(&mut self, root: Var) -> Result<Vec<ParamGrad>> {
        let (rows, cols) = self.shape(root);
        if rows != 1 || cols != 1 {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        let params: Vec<(Var, usize)> = self.nodes[..=root.0]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(g) => Some((Var(i), g)),
                _ => None,
            })
            .collect();
        let wrt: Vec<Var> = params.iter().map(|p| p.0).collect();
        let grads = self.grad(root, None, &wrt);
        Ok(params
            .iter()
            .zip(grads)
            .map(|(&(v, group), g)| ParamGrad {
                group,
                grad: match g {
                    Some(g) => self.value(g).clone(),
                    None => {
                        let (r, c) = self.shape(v);
                        Mat::zeros(r, c)
                    }
                },
            })
            .collect())
    }

    fn vjp(&mut self, out: Var, op: &Op, g: Var, depends: &[bool]) -> Vec<(Var, Var)> {
        let needs = |v: &Var| depends[v.0];
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Const | Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if needs(&a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)
                    } else {
                        self.matmul_t(g, b, false, !tb)
                    };
                    res.push((a, ga));
                }
                if needs(&b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)
                    } else {
                        self.matmul_t(a, g, !ta, false)
                    };
                    res.push((b, gb));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    res.push((*a, g));
                }
                if needs(b) {
                    res.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    res.push((*a, g));
                }
                if needs(b) {
                    let n = self.neg(g);
                    res.push((*b, n));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let ga = self.mul(g, *b);
                    res.push((*a, ga));
                }
                if needs(b) {
                    let gb = self.mul(g, *a);
                    res.push((*b, gb));
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    let ga = self.div(g, *b);
                    res.push((*a, ga));
                }
                if needs(b) {
                    let q = self.div(out, *b);
                    let t = self.mul(g, q);
                    let gb = self.neg(t);
                    res.push((*b, gb));
                }
            }
            Op::Scale(a, c) => {
                let ga = self.scale(g, *c);
                res.push((*a, ga));
            }
            Op::AddScalar(a, _) => res.push((*a, g)),
            Op::Sin(a) => {
                let c = self.cos(*a);
                let ga = self.mul(g, c);
                res.push((*a, ga));
            }
            Op::Cos(a) => {
                let s = self.sin(*a);
                let ns = self.neg(s);
                let ga = self.mul(g, ns);
                res.push((*a, ga));
            }
            Op::Exp(a) => {
                let ga = self.mul(g, out);
                res.push((*a, ga));
            }
            Op::Log(a) => {
                let ga = self.div(g, *a);
                res.push((*a, ga));
            }
            Op::Sqrt(a) => {
                let h = self.scale(g, 0.5);
                let ga = self.div(h, out);
                res.push((*a, ga));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.rsub_scalar(1.0, out);
                let d = self.mul(out, one_minus);
                let ga = self.mul(g, d);
                res.push((*a, ga));
            }
            Op::Softplus(a, beta) => {
                let z = self.scale(*a, *beta);
                let d = self.sigmoid(z);
                let ga = self.mul(g, d);
                res.push((*a, ga));
            }
            Op::Relu(a) => {
                let mask = self.v(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                let ga = self.mul(g, m);
                res.push((*a, ga));
            }
            Op::Abs(a) => {
                let mask = self.v(*a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let m = self.constant(mask);
                let ga = self.mul(g, m);
                res.push((*a, ga));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let mask = self.v(*a).map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                let ga = self.mul(g, m);
                res.push((*a, ga));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts.iter() {
                    let w = self.v(*p).cols;
                    if needs(p) {
                        let gp = self.slice_cols(g, offset, w);
                        res.push((*p, gp));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start, _) => {
                let total = self.v(*a).cols;
                let ga = self.pad_cols(g, *start, total);
                res.push((*a, ga));
            }
            Op::PadCols(a, start, _) => {
                let w = self.v(*a).cols;
                let ga = self.slice_cols(g, *start, w);
                res.push((*a, ga));
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                let ga = self.broadcast_scalar(g, r, c);
                res.push((*a, ga));
            }
            Op::BroadcastScalar(a, _, _) => {
                let ga = self.sum_all(g);
                res.push((*a, ga));
            }
            Op::SumCols(a) => {
                let c = self.v(*a).cols;
                let ga = self.broadcast_cols(g, c);
                res.push((*a, ga));
            }
            Op::BroadcastCols(a, _) => {
                let ga = self.sum_cols(g);
                res.push((*a, ga));
            }
            Op::SumRows(a) => {
                let r = self.v(*a).rows;
                let ga = self.broadcast_rows(g, r);
                res.push((*a, ga));
            }
            Op::BroadcastRows(a, _) => {
                let ga = self.sum_rows(g);
                res.push((*a, ga));
            }
            Op::Reshape(a, _, _) => {
                let (r, c) = self.shape(*a);
                let ga = self.reshape(g, r, c);
                res.push((*a, ga));
            }
            Op::CumSumCols(a, reverse) => {
                let ga = self.cumsum_cols(g, !reverse);
                res.push((*a, ga));
            }
            Op::GatherRows(a, idx) => {
                let r = self.v(*a).rows;
                let ga = self.scatter_rows(g, idx.clone(), r);
                res.push((*a, ga));
            }
            Op::ScatterRows(a, idx, _) => {
                let ga = self.gather_rows(g, idx.clone());
                res.push((*a, ga));
            }
        }
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(f: impl Fn(&mut Tape, Var) -> Var, x: f64) -> (f64, f64) {
        let mut t = Tape::new();
        let xv = t.input(Mat::scalar(x));
        let y = f(&mut t, xv);
        let g = t.grad(y, None, &[xv])[0].expect("depends");
        (t.value(y).item(), t.value(g).item())
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let (_, g) = scalar_grad(|t, x| t.mul(x, x), 3.0);
        assert_eq!(g, 6.0);
    }

    #[test]
    fn product_gradients_swap_arguments() {
        let mut t = Tape::new();
        let x = t.input(Mat::scalar(2.0));
        let y = t.input(Mat::scalar(5.0));
        let f = t.mul(x, y);
        let g = t.grad(f, None, &[x, y]);
        assert_eq!(t.value(g[0].unwrap()).item(), 5.0);
        assert_eq!(t.value(g[1].unwrap()).item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let p = t.param(0, Mat::zeros(2, 2));
        assert!(matches!(
            t.backward(p),
            Err(Error::NonScalarRoot { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn unreached_parameters_get_exact_zero() {
        let mut t = Tape::new();
        let a = t.param(0, Mat::scalar(1.5));
        let _unused = t.param(1, Mat::from_vec(1, 2, vec![3.0, 4.0]));
        let y = t.mul(a, a);
        let grads = t.backward(y).unwrap();
        assert_eq!(grads[0].grad.item(), 3.0);
        assert_eq!(grads[1].grad.data, vec![0.0, 0.0]);
    }

    #[test]
    fn second_derivative_through_recorded_gradient() {
        // d/dx (d/dx sin x) = -sin x
        let mut t = Tape::new();
        let x = t.input(Mat::scalar(0.7));
        let y = t.sin(x);
        let dy = t.grad(y, None, &[x])[0].unwrap();
        let ddy = t.grad(dy, None, &[x])[0].unwrap();
        assert!((t.value(ddy).item() + 0.7f64.sin()).abs() < 1e-15);
    }

    /// Every op against central differences on a small composite.
    #[test]
    fn composite_matches_finite_differences() {
        let idx: Arc<[usize]> = vec![1, 0, 1].into();
        let build = |t: &mut Tape, x: Var| {
            let w = t.constant(Mat::from_vec(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]));
            let h = t.matmul(x, w);
            let wt = t.constant(Mat::from_vec(2, 3, vec![0.2, 0.1, -0.3, 0.7, 0.2, 0.05]));
            let h2 = t.matmul_t(x, wt, false, false);
            let h3 = t.matmul_t(h2, wt, false, true);
            let s = t.sin(h);
            let c = t.cos(h);
            let sp = t.softplus(h, 10.0);
            let sg = t.sigmoid(h);
            let e = t.exp(sg);
            let l = t.ln(e);
            let a = t.abs(c);
            let sq = t.add_scalar(a, 1.0);
            let r = t.sqrt(sq);
            let d = t.div(sp, r);
            let cat = t.concat(&[s, d, l, h3]);
            let sl = t.slice_cols(cat, 1, 7);
            let cs = t.cumsum_cols(sl, false);
            let rcs = t.cumsum_cols(cs, true);
            let rsum = t.sum_cols(rcs);
            let bc = t.broadcast_cols(rsum, 2);
            let gathered = t.gather_rows(bc, idx.clone());
            let scattered = t.scatter_rows(gathered, idx.clone(), 2);
            let colsum = t.sum_rows(scattered);
            let rep = t.broadcast_rows(colsum, 2);
            let m = t.mul(rep, bc);
            let rs = t.reshape(m, 1, 4);
            let pc = t.pad_cols(rs, 1, 6);
            let cl = t.clamp(pc, -50.0, 50.0);
            let rl = t.relu(cl);
            let sub = t.sub(rl, cl);
            let tot = t.sum_all(sub);
            let b = t.broadcast_scalar(tot, 1, 2);
            let mm = t.mean_all(b);
            t.scale(mm, 0.01)
        };
        let x0 = vec![0.3, -0.8, 1.1, 0.45];
        let mut t = Tape::new();
        let x = t.input(Mat::from_vec(2, 2, x0.clone()));
        let y = build(&mut t, x);
        let g = t.grad(y, None, &[x])[0].unwrap();
        let analytic = t.value(g).clone();
        let h = 1e-6;
        for i in 0..4 {
            let eval = |delta: f64| {
                let mut xs = x0.clone();
                xs[i] += delta;
                let mut t = Tape::new();
                let x = t.input(Mat::from_vec(2, 2, xs));
                let y = build(&mut t, x);
                t.value(y).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[i];
            assert!(
                (fd - a).abs() <= 1e-7 * (1.0 + a.abs()),
                "coord {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    /// Gradient of a gradient norm (the Eikonal pattern) against finite
    /// differences of the first-order gradient.
    #[test]
    fn double_backward_through_mlp_matches_finite_differences() {
        let w1v = Mat::from_vec(2, 3, vec![0.5, -0.3, 0.8, 0.2, 0.9, -0.4]);
        let w2v = Mat::from_vec(3, 1, vec![0.7, -1.1, 0.3]);
        let loss = |w1: Mat| -> (f64, Mat) {
            let mut t = Tape::new();
            let x = t.input(Mat::from_vec(2, 2, vec![0.1, 0.2, -0.3, 0.4]));
            let w1 = t.param(0, w1);
            let w2 = t.param(1, w2v.clone());
            let h = t.matmul(x, w1);
            let a = t.softplus(h, 5.0);
            let s = t.matmul(a, w2);
            let gx = t.grad(s, None, &[x])[0].unwrap();
            let sq = t.mul(gx, gx);
            let n2 = t.sum_cols(sq);
            let n = t.sqrt(n2);
            let e = t.add_scalar(n, -1.0);
            let e2 = t.mul(e, e);
            let l = t.mean_all(e2);
            let grads = t.backward(l).unwrap();
            (t.value(l).item(), grads[0].grad.clone())
        };
        let (_, analytic) = loss(w1v.clone());
        let h = 1e-6;
        for i in 0..6 {
            let mut p = w1v.clone();
            p.data[i] += h;
            let (lp, _) = loss(p);
            let mut m = w1v.clone();
            m.data[i] -= h;
            let (lm, _) = loss(m);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - analytic.data[i]).abs() < 1e-7,
                "coord {i}: {fd} vs {}",
                analytic.data[i]
            );
        }
    }
}
