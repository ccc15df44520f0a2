//! Tape-based reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Tape`] borrows a [`ParameterSet`] for its lifetime. Parameter leaves
//! read their values straight from the set, so large embedding tables are
//! never copied into the tape. Every operation appends one node; `backward`
//! walks the nodes in reverse and returns dense [`Gradients`] aligned with
//! the parameter set.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Array, Gradients, ParamId, ParameterSet};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, one result per column.
    Rows,
    /// Reduce within each row, one result per row.
    Cols,
}

enum Op<S> {
    Param(ParamId),
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, S),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, Axis),
    Mean(Var, Axis),
    Sum(Var),
    Concat(Vec<Var>, Axis),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Dropout(Var, Vec<S>),
    Cosine(Var, Var),
    CrossEntropy(Var, usize, bool),
}

struct Node<S> {
    op: Op<S>,
    // None for parameter leaves, whose value lives in the parameter set.
    value: Option<Array<S>>,
}

pub struct Tape<'p, S: Scalar> {
    params: &'p ParameterSet<S>,
    nodes: Vec<Node<S>>,
    param_vars: Vec<Option<Var>>,
    non_finite: Option<String>,
    clamped: usize,
}

/// Probability floor applied by [`Tape::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p ParameterSet<S>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            non_finite: None,
            clamped: 0,
        }
    }

    pub fn params(&self) -> &'p ParameterSet<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of cross-entropy terms whose target probability hit the floor.
    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    pub fn value(&self, v: Var) -> &Array<S> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    /// Fails if any operation so far produced NaN or ±Inf.
    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op<S>, value: Array<S>, name: &str) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(format!("{name} (node {})", self.nodes.len()));
        }
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Array<S>) -> Var {
        self.push(Op::Constant, value, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), value, "matmul_t")
    }

    /// Elementwise sum. `b` may also be a `1 × cols` row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let mut value = self.value(a).clone();
            value.add_assign(self.value(b));
            self.push(Op::Add(a, b), value, "add")
        } else if sb[0] == 1 && sb[1] == sa[1] {
            let mut value = self.value(a).clone();
            let row = self.value(b).data().to_vec();
            for r in 0..sa[0] {
                for (x, &y) in value.row_mut(r).iter_mut().zip(&row) {
                    *x += y;
                }
            }
            self.push(Op::AddRow(a, b), value, "add")
        } else {
            panic!("add dimension mismatch: {sa:?} + {sb:?}");
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "sub dimension mismatch: {sa:?} - {sb:?}");
        let mut value = self.value(a).clone();
        value.axpy(-S::one(), self.value(b));
        self.push(Op::Sub(a, b), value, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "mul dimension mismatch: {sa:?} * {sb:?}");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), Array::from_vec(sa[0], sa[1], data), "mul")
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: S, shift: S) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(Op::Affine(a, scale), value, "affine")
    }

    pub fn scale(&mut self, a: Var, scale: S) -> Var {
        self.affine(a, scale, S::zero())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(S::tanh);
        self.push(Op::Tanh(a), value, "tanh")
    }

    /// Softmax normalizing each row (`Axis::Cols`) or each column (`Axis::Rows`).
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let x = self.value(a);
        let value = match axis {
            Axis::Cols => softmax_rows(x),
            Axis::Rows => softmax_rows(&x.transpose()).transpose(),
        };
        self.push(Op::Softmax(a, axis), value, "softmax")
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Var {
        let x = self.value(a);
        let [rows, cols] = x.shape();
        assert!(rows > 0 && cols > 0, "mean of empty array {:?}", x.shape());
        let value = match axis {
            Axis::Rows => {
                let mut out = Array::zeros(1, cols);
                for r in 0..rows {
                    for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                let n = S::lit(rows as f64);
                out.map(|v| v / n)
            }
            Axis::Cols => {
                let n = S::lit(cols as f64);
                let data = (0..rows).map(|r| x.row(r).iter().copied().sum::<S>() / n).collect();
                Array::from_vec(rows, 1, data)
            }
        };
        self.push(Op::Mean(a, axis), value, "mean")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value, "sum")
    }

    /// Concatenates along columns (`Axis::Cols`, side by side) or rows (`Axis::Rows`, stacked).
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Var {
        assert!(!parts.is_empty(), "concat of zero arrays");
        let shapes: Vec<[usize; 2]> = parts.iter().map(|&p| self.shape(p)).collect();
        let value = match axis {
            Axis::Cols => {
                let rows = shapes[0][0];
                assert!(
                    shapes.iter().all(|s| s[0] == rows),
                    "concat dimension mismatch along columns: {shapes:?}"
                );
                let cols: usize = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Array::from_vec(rows, cols, data)
            }
            Axis::Rows => {
                let cols = shapes[0][1];
                assert!(
                    shapes.iter().all(|s| s[1] == cols),
                    "concat dimension mismatch along rows: {shapes:?}"
                );
                let rows: usize = shapes.iter().map(|s| s[0]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Array::from_vec(rows, cols, data)
            }
        };
        self.push(Op::Concat(parts.to_vec(), axis), value, "concat")
    }

    /// Rows of `a` selected by `indices` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < x.rows(), "gather row {i} out of range for {:?}", x.shape());
            data.extend_from_slice(x.row(i));
        }
        let value = Array::from_vec(indices.len(), cols, data);
        self.push(Op::GatherRows(a, indices.to_vec()), value, "gather_rows")
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(
            start <= end && end <= x.cols(),
            "slice_cols {start}..{end} out of range for {:?}",
            x.shape()
        );
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let value = Array::from_vec(x.rows(), end - start, data);
        self.push(Op::SliceCols(a, start), value, "slice_cols")
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. Identity when
    /// `p == 0` or `train` is false.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        if !train || p == 0.0 {
            return a;
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let x = self.value(a);
        let mask: Vec<S> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Array::from_vec(x.rows(), x.cols(), data);
        self.push(Op::Dropout(a, mask), value, "dropout")
    }

    /// Cosine similarity of two equally shaped arrays, as a `1 × 1` node.
    /// Zero when either argument has zero norm.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Var {
        let (su, sv) = (self.shape(u), self.shape(v));
        assert_eq!(su, sv, "cosine_similarity dimension mismatch: {su:?} vs {sv:?}");
        let (dot, nu, nv) = cosine_parts(self.value(u), self.value(v));
        let c = if nu == S::zero() || nv == S::zero() {
            S::zero()
        } else {
            dot / (nu * nv)
        };
        self.push(Op::Cosine(u, v), Array::scalar(c), "cosine_similarity")
    }

    /// `-ln softmax(logits)[label]` for a `1 × m` logit row, with the target
    /// probability floored at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let z = self.value(logits);
        assert_eq!(
            z.rows(),
            1,
            "cross_entropy expects a single logit row, got {:?}",
            z.shape()
        );
        assert!(label < z.cols(), "label {label} out of range for {:?}", z.shape());
        let lse = log_sum_exp(z.data());
        let mut loss = lse - z.data()[label];
        let floor = S::lit(PROB_FLOOR);
        let clamped = (-loss).exp() < floor;
        if clamped {
            loss = -floor.ln();
            self.clamped += 1;
        }
        self.push(
            Op::CrossEntropy(logits, label, clamped),
            Array::scalar(loss),
            "cross_entropy",
        )
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        let shape = self.shape(output);
        if shape != [1, 1] {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {shape:?}"
            )));
        }
        self.check_finite()?;

        let mut grads: Vec<Option<Array<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array::scalar(S::one()));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(id) => out.get_mut(*id).add_assign(&g),
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Array::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Affine(a, scale) => {
                    let s = *scale;
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let ga = zip_map(&g, y, |gx, yx| gx * yx * (S::one() - yx));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    let ga = zip_map(&g, y, |gx, yx| gx * (S::one() - yx * yx));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a, axis) => {
                    let y = node.value.as_ref().unwrap();
                    let ga = match axis {
                        Axis::Cols => softmax_rows_backward(y, &g),
                        Axis::Rows => softmax_rows_backward(&y.transpose(), &g.transpose()).transpose(),
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a, axis) => {
                    let [rows, cols] = self.shape(*a);
                    let mut ga = Array::zeros(rows, cols);
                    match axis {
                        Axis::Rows => {
                            let n = S::lit(rows as f64);
                            for r in 0..rows {
                                for (o, &v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                                    *o = v / n;
                                }
                            }
                        }
                        Axis::Cols => {
                            let n = S::lit(cols as f64);
                            for r in 0..rows {
                                let v = g.data()[r] / n;
                                ga.row_mut(r).iter_mut().for_each(|o| *o = v);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let [rows, cols] = self.shape(*a);
                    accumulate(&mut grads, *a, Array::filled(rows, cols, g.item()));
                }
                Op::Concat(parts, axis) => match axis {
                    Axis::Cols => {
                        let mut offset = 0;
                        for &p in parts {
                            let [rows, cols] = self.shape(p);
                            let mut gp = Array::zeros(rows, cols);
                            for r in 0..rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            offset += cols;
                            accumulate(&mut grads, p, gp);
                        }
                    }
                    Axis::Rows => {
                        let mut offset = 0;
                        for &p in parts {
                            let [rows, cols] = self.shape(p);
                            let slice = &g.data()[offset * cols..(offset + rows) * cols];
                            offset += rows;
                            accumulate(&mut grads, p, Array::from_vec(rows, cols, slice.to_vec()));
                        }
                    }
                },
                Op::GatherRows(a, indices) => {
                    let [rows, cols] = self.shape(*a);
                    let mut ga = Array::zeros(rows, cols);
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let [rows, cols] = self.shape(*a);
                    let width = g.cols();
                    let mut ga = Array::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + width].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Dropout(a, mask) => {
                    let data = g.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
                    accumulate(&mut grads, *a, Array::from_vec(g.rows(), g.cols(), data));
                }
                Op::Cosine(u, v) => {
                    let (xu, xv) = (self.value(*u), self.value(*v));
                    let (dot, nu, nv) = cosine_parts(xu, xv);
                    if nu > S::zero() && nv > S::zero() {
                        let gc = g.item();
                        let c = dot / (nu * nv);
                        let inv = S::one() / (nu * nv);
                        let gu = zip_map(xv, xu, |b, a| gc * (b * inv - c * a / (nu * nu)));
                        let gv = zip_map(xu, xv, |a, b| gc * (a * inv - c * b / (nv * nv)));
                        accumulate(&mut grads, *u, gu);
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::CrossEntropy(logits, label, clamped) => {
                    if !*clamped {
                        let z = self.value(*logits);
                        let mut p = softmax_rows(z);
                        p.data_mut()[*label] -= S::one();
                        let gl = g.item();
                        accumulate(&mut grads, *logits, p.map(|x| x * gl));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Array<S>>], v: Var, g: Array<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<S: Scalar>(a: &Array<S>, b: &Array<S>, f: impl Fn(S, S) -> S) -> Array<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::from_vec(a.rows(), a.cols(), data)
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<S>().ln()
}

pub(crate) fn softmax_rows<S: Scalar>(x: &Array<S>) -> Array<S> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn softmax_rows_backward<S: Scalar>(y: &Array<S>, g: &Array<S>) -> Array<S> {
    let mut out = Array::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), g.row(r));
        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    out
}

fn cosine_parts<S: Scalar>(u: &Array<S>, v: &Array<S>) -> (S, S, S) {
    let dot = u.data().iter().zip(v.data()).map(|(&a, &b)| a * b).sum();
    (dot, u.sum_sq().sqrt(), v.sum_sq().sqrt())
}
