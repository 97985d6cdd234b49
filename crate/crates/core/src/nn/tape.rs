//! Reverse-mode automatic differentiation over batched matrices.
//!
//! Every operation appends a node holding its forward value to a [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse, propagating adjoints only
//! into nodes that depend on a trainable leaf, and finally accumulates the
//! adjoints of parameter leaves into the [`ParamStore`] they came from.

use serde::{Deserialize, Serialize};

use super::matrix::{self, Matrix};
use super::params::{ParamSource, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    #[serde(alias = "silu")]
    SiLU,
    #[serde(alias = "relu")]
    ReLU,
    #[serde(alias = "tanh")]
    Tanh,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::SiLU => x * sigmoid(x),
            Activation::ReLU => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::SiLU => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(String),
    Affine { x: Var, w: Var, b: Var },
    Act { x: Var, kind: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    RowAffine { x: Var, scale: Vec<f64> },
    Exp(Var),
    MixLogVar { log_var: Var, w: Vec<f64> },
    Clamp { x: Var, lo: f64, hi: f64 },
    HCat(Var, Var),
    Columns { x: Var, start: usize },
    SumRows(Var),
    Mean(Var),
    Gather { table: Var, idx: Vec<usize> },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Matrix>>>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    /// Adjoint of `v` after [`Tape::backward`]; `None` if `v` does not
    /// depend on anything trainable or backward has not run.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, false)
    }

    /// Free input whose adjoint is kept (read it with [`Tape::grad`]).
    pub fn variable(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Variable, true)
    }

    /// Trainable leaf copied from `store`; its adjoint is accumulated back
    /// into the store under the same name.
    pub fn param(&mut self, store: &(impl ParamSource + ?Sized), name: &str) -> Result<Var> {
        let value = store.require(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_owned()), true))
    }

    /// Parameter read as a constant (frozen).
    pub fn frozen_param(&mut self, store: &(impl ParamSource + ?Sized), name: &str) -> Result<Var> {
        let value = store.require(name)?.clone();
        Ok(self.constant(value))
    }

    /// `x W^T + b`, `W` is `out x in`, `b` is `1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.cols() || bv.shape() != (1, wv.rows()) {
            return Err(Error::shape(format!(
                "affine: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let out = matrix::affine(xv, wv, bv);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Affine { x, w, b }, ng))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        let ng = self.needs(x);
        self.push(out, Op::Act { x, kind }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `y[i, j] = scale[i] * x[i, j] + shift[i]` with constant per-row coefficients.
    pub fn row_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if scale.len() != xv.rows() || shift.len() != xv.rows() {
            return Err(Error::shape(format!(
                "row_affine: {} rows, {} scales, {} shifts",
                xv.rows(),
                scale.len(),
                shift.len()
            )));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let (s, c) = (scale[i], shift[i]);
            out.row_mut(i).iter_mut().for_each(|v| *v = s * *v + c);
        }
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::RowAffine {
                x,
                scale: scale.to_vec(),
            },
            ng,
        ))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(out, Op::Exp(a), ng)
    }

    /// Log-variance of the per-row mixture `w * exp(lv) + (1 - w)`.
    ///
    /// Rows with `w == 1` pass through unchanged and rows with `w == 0` give
    /// exactly zero, so the endpoints of the interpolation are exact.
    pub fn mix_log_var(&mut self, log_var: Var, w: &[f64]) -> Result<Var> {
        let lv = self.value(log_var);
        if w.len() != lv.rows() {
            return Err(Error::shape(format!(
                "mix_log_var: {} rows, {} weights",
                lv.rows(),
                w.len()
            )));
        }
        let mut out = lv.clone();
        for (i, &wi) in w.iter().enumerate() {
            for v in out.row_mut(i) {
                *v = mixed_log_var(*v, wi);
            }
        }
        let ng = self.needs(log_var);
        Ok(self.push(
            out,
            Op::MixLogVar {
                log_var,
                w: w.to_vec(),
            },
            ng,
        ))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.needs(x);
        self.push(out, Op::Clamp { x, lo, hi }, ng)
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn hcat(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).rows() != self.value(b).rows() {
            return Err(Error::shape(format!(
                "hcat: {} rows vs {} rows",
                self.value(a).rows(),
                self.value(b).rows()
            )));
        }
        let out = self.value(a).hcat(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::HCat(a, b), ng))
    }

    /// Columns `[start, start + len)`.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.value(x).cols() {
            return Err(Error::shape(format!(
                "columns {start}..{} out of {}",
                start + len,
                self.value(x).cols()
            )));
        }
        let out = self.value(x).columns(start, len);
        let ng = self.needs(x);
        Ok(self.push(out, Op::Columns { x, start }, ng))
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.iter_rows().map(|r| r.iter().sum()).collect();
        let out = Matrix::from_vec(xv.rows(), 1, data).expect("one sum per row");
        let ng = self.needs(x);
        self.push(out, Op::SumRows(x), ng)
    }

    /// Mean over all elements as a `1 x 1` node. Empty input gives 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = if xv.is_empty() {
            0.0
        } else {
            xv.sum() / xv.len() as f64
        };
        let ng = self.needs(x);
        self.push(Matrix::filled(1, 1, m), Op::Mean(x), ng)
    }

    /// Row lookup `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Matrix::zeros(idx.len(), tv.cols());
        for (i, &k) in idx.iter().enumerate() {
            if k >= tv.rows() {
                return Err(Error::Input(format!(
                    "index {k} out of range for table with {} rows",
                    tv.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(tv.row(k));
        }
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Propagate `d loss / d node` through the tape and accumulate parameter
    /// gradients into `store`. `loss` must be `1 x 1`. A tape can be
    /// differentiated once.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Usage(
                "backward already ran on this tape; build a new tape".into(),
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(name), Some(g)) = (&node.op, g) {
                store.accumulate_grad(name, g)?;
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                if self.needs(*x) {
                    let wv = self.value(*w);
                    let mut dx = Matrix::zeros(g.rows(), wv.cols());
                    matrix::gemm_ab(g, wv, 0.0, &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let xv = self.value(*x);
                    let mut dw = Matrix::zeros(g.cols(), xv.cols());
                    matrix::gemm_atb(g, xv, 0.0, &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if self.needs(*b) {
                    let db = Matrix::row_vector(&column_sums(g));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Act { x, kind } => {
                let dx = self.value(*x).zip_map(g, |xv, gv| gv * kind.derivative(xv));
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da = g.zip_map(self.value(*b), |gv, bv| gv * bv);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = g.zip_map(self.value(*a), |gv, av| gv * av);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| c * v)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::RowAffine { x, scale } => {
                let mut dx = g.clone();
                for (r, s) in scale.iter().enumerate() {
                    dx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Exp(a) => {
                let da = g.zip_map(&node.value, |gv, y| gv * y);
                self.accumulate(grads, *a, da);
            }
            Op::MixLogVar { log_var, w } => {
                let lv = self.value(*log_var);
                let mut d = g.clone();
                for (r, &wi) in w.iter().enumerate() {
                    let lrow = lv.row(r);
                    for (dv, &l) in d.row_mut(r).iter_mut().zip(lrow) {
                        *dv *= mixed_log_var_derivative(l, wi);
                    }
                }
                self.accumulate(grads, *log_var, d);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = self.value(*x).zip_map(g, |xv, gv| {
                    if xv < *lo || xv > *hi {
                        0.0
                    } else {
                        gv
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::HCat(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.columns(0, ca));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.columns(ca, cb));
                }
            }
            Op::Columns { x, start } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let len = g.cols();
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let gv = g.get(r, 0);
                    dx.row_mut(r).iter_mut().for_each(|v| *v = gv);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                if !xv.is_empty() {
                    let gv = g.get(0, 0) / xv.len() as f64;
                    self.accumulate(grads, *x, Matrix::filled(xv.rows(), xv.cols(), gv));
                }
            }
            Op::Gather { table, idx } => {
                let tv = self.value(*table);
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &k) in idx.iter().enumerate() {
                    for (d, gv) in dt.row_mut(k).iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; g.cols()];
    for r in g.iter_rows() {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out
}

/// `log(w * exp(lv) + 1 - w)` with exact endpoints.
pub(crate) fn mixed_log_var(lv: f64, w: f64) -> f64 {
    if w == 1.0 {
        lv
    } else if w == 0.0 {
        0.0
    } else {
        (w * lv.exp() + (1.0 - w)).ln()
    }
}

fn mixed_log_var_derivative(lv: f64, w: f64) -> f64 {
    if w == 1.0 {
        1.0
    } else if w == 0.0 {
        0.0
    } else {
        let a = w * lv.exp();
        a / (a + 1.0 - w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_input() {
        // loss = sum(W x) with x = [1, 1]  =>  dloss/dW rows = [1, 1]
        let mut store = ParamStore::new();
        store
            .insert("w", Matrix::from_vec(2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap())
            .unwrap();
        store.insert("b", Matrix::zeros(1, 2)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[1.0, 1.0]));
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let y = tape.affine(x, w, b).unwrap();
        let s = tape.sum_rows(y);
        let loss = tape.mean(s);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().as_slice(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(store.grad("b").unwrap().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::filled(2, 2, 1.0)).unwrap();
        let mut tape = Tape::new();
        let _w = tape.param(&store, "w").unwrap();
        let c = tape.constant(Matrix::filled(1, 1, 3.0));
        tape.backward(c, &mut store).unwrap();
        assert!(store.grad("w").unwrap().as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn second_backward_is_a_usage_error() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::filled(1, 1, 2.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let l = tape.mul(w, w).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert!(matches!(tape.backward(l, &mut store), Err(Error::Usage(_))));
        assert_eq!(store.grad("w").unwrap().as_slice(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.variable(Matrix::zeros(2, 1));
        assert!(matches!(tape.backward(x, &mut store), Err(Error::Shape(_))));
    }

    #[test]
    fn missing_param_is_a_config_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        assert!(matches!(tape.param(&store, "nope"), Err(Error::Config(_))));
    }

    #[test]
    fn mix_log_var_endpoints_exact() {
        for lv in [-3.7, 0.0, 1.234_567, 19.0] {
            assert_eq!(mixed_log_var(lv, 1.0), lv);
            assert_eq!(mixed_log_var(lv, 0.0), 0.0);
        }
        // 0.5 * 4 + 0.5 = 2.5
        assert!((mixed_log_var(4f64.ln(), 0.5) - 2.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let t = tape.variable(Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let g = tape.gather_rows(t, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).as_slice(), &[3.0, 1.0, 3.0]);
        let s = tape.sum_rows(g);
        let l = tape.mean(s);
        tape.backward(l, &mut store).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(tape.grad(t).unwrap().as_slice(), &[third, 0.0, 2.0 * third]);
        assert!(matches!(tape.gather_rows(t, &[3]), Err(Error::Input(_))));
    }
}
