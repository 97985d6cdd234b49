//! ODE integration of `dx/dt = v(x, t)` from `t = 0` to `t = 1`.
//!
//! Three schemes: Euler, Heun's second-order method whose final step is a
//! plain Euler step (so `k` steps cost `2k - 1` evaluations), and an adaptive
//! Dormand-Prince 5(4) pair with PI step-size control. A batch of states is
//! integrated as one system; one call of the field on the whole batch counts
//! as one function evaluation (NFE).

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::KappaMode;
use crate::data::Dataset;
use crate::distributions::{standard_normal_matrix, DiagGaussian};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::Matrix;

/// Default relative and absolute tolerance of the adaptive solver.
pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_MAX_NFE: usize = 100_000;
/// Rows per independently integrated chunk in the batched entry points.
/// Fixed so results do not depend on the thread count.
pub const CHUNK_ROWS: usize = 256;

const RK45_H0: f64 = 0.01;
const RK45_SAFETY: f64 = 0.9;
const RK45_MIN_FACTOR: f64 = 0.2;
const RK45_MAX_FACTOR: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SolverSpec {
    Euler { steps: usize },
    Heun2 { steps: usize },
    Rk45 { rtol: f64, atol: f64, max_nfe: usize },
}

impl SolverSpec {
    pub fn rk45() -> Self {
        SolverSpec::Rk45 {
            rtol: DEFAULT_TOL,
            atol: DEFAULT_TOL,
            max_nfe: DEFAULT_MAX_NFE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SolverSpec::Euler { steps } | SolverSpec::Heun2 { steps } if steps == 0 => {
                Err(Error::config("solver steps must be >= 1"))
            }
            SolverSpec::Rk45 { rtol, atol, max_nfe } => {
                if !(rtol > 0.0 && atol > 0.0 && rtol.is_finite() && atol.is_finite()) {
                    return Err(Error::config(format!("rtol and atol must be positive, got {rtol}, {atol}")));
                }
                if max_nfe == 0 {
                    return Err(Error::config("max_nfe must be >= 1"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Evaluations a fixed-step solver performs; `None` for RK45.
    pub fn fixed_nfe(&self) -> Option<usize> {
        match *self {
            SolverSpec::Euler { steps } => Some(steps),
            SolverSpec::Heun2 { steps } => Some(2 * steps - 1),
            SolverSpec::Rk45 { .. } => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SolverSpec::Euler { .. } => "euler",
            SolverSpec::Heun2 { .. } => "heun2",
            SolverSpec::Rk45 { .. } => "rk45",
        }
    }

    /// Fixed-step solver of the given kind spending exactly `nfe` evaluations.
    pub fn with_nfe(kind: &str, nfe: usize) -> Result<Self> {
        let spec = match kind {
            "euler" => SolverSpec::Euler { steps: nfe },
            "heun2" if nfe % 2 == 1 => SolverSpec::Heun2 { steps: nfe.div_ceil(2) },
            "heun2" => return Err(Error::config(format!("heun2 spends an odd number of evaluations, got {nfe}"))),
            other => return Err(Error::config(format!("no fixed-NFE variant of solver `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for SolverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverSpec::Euler { steps } => write!(f, "euler({steps})"),
            SolverSpec::Heun2 { steps } => write!(f, "heun2({steps})"),
            SolverSpec::Rk45 { rtol, atol, .. } => write!(f, "rk45({rtol:e},{atol:e})"),
        }
    }
}

/// A batched right-hand side.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    /// Velocity at every row of `x`, all at time `t`.
    fn eval(&self, x: &Matrix, t: f64) -> Result<Matrix>;
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        (**self).eval(x, t)
    }
}

/// A closure as a field.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&Matrix, f64) -> Matrix + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&Matrix, f64) -> Matrix + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        Ok((self.f)(x, t))
    }
}

/// Wrapper counting calls of the inner field.
pub struct CountingField<V> {
    inner: V,
    calls: AtomicUsize,
}

impl<V: VectorField> CountingField<V> {
    pub fn new(inner: V) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<V: VectorField> VectorField for CountingField<V> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.eval(x, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Increasing from 0 to 1.
    pub times: Vec<f64>,
    /// Batch state at each time.
    pub states: Vec<Matrix>,
    pub nfe: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &Matrix {
        self.states.last().expect("trajectories hold at least the initial state")
    }

    pub fn initial_state(&self) -> &Matrix {
        &self.states[0]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn eval_checked(field: &(impl VectorField + ?Sized), x: &Matrix, t: f64) -> Result<Matrix> {
    let v = field.eval(x, t)?;
    if v.shape() != x.shape() {
        return Err(Error::shape(format!(
            "field returned {:?} for a state of shape {:?}",
            v.shape(),
            x.shape()
        )));
    }
    if !v.all_finite() {
        return Err(Error::Evaluation(format!("non-finite velocity at t = {t}")));
    }
    Ok(v)
}

/// `x + h * sum_j c_j k_j`.
fn combine(x: &Matrix, h: f64, terms: &[(f64, &Matrix)]) -> Matrix {
    let mut out = x.clone();
    for &(c, k) in terms {
        if c != 0.0 {
            out.axpy(h * c, k);
        }
    }
    out
}

struct Recorder {
    keep_states: bool,
    times: Vec<f64>,
    states: Vec<Matrix>,
}

impl Recorder {
    fn push(&mut self, t: f64, x: &Matrix) {
        self.times.push(t);
        if self.keep_states {
            self.states.push(x.clone());
        }
    }

    fn finish(mut self, last: Matrix, nfe: usize) -> Trajectory {
        if !self.keep_states {
            let t = *self.times.last().expect("non-empty");
            self.times = vec![t];
            self.states = vec![last];
        }
        Trajectory {
            times: self.times,
            states: self.states,
            nfe,
        }
    }
}

fn integrate(field: &(impl VectorField + ?Sized), x_init: &Matrix, spec: SolverSpec, keep_states: bool) -> Result<Trajectory> {
    spec.validate()?;
    if x_init.cols() != field.dim() {
        return Err(Error::shape(format!(
            "initial state has {} coordinates, field has {}",
            x_init.cols(),
            field.dim()
        )));
    }
    if !x_init.all_finite() {
        return Err(Error::Input("initial state must be finite".into()));
    }
    let mut rec = Recorder {
        keep_states,
        times: Vec::new(),
        states: Vec::new(),
    };
    rec.push(0.0, x_init);
    let mut x = x_init.clone();
    match spec {
        SolverSpec::Euler { steps } => {
            let h = 1.0 / steps as f64;
            for k in 0..steps {
                let t = k as f64 / steps as f64;
                let v = eval_checked(field, &x, t)?;
                x.axpy(h, &v);
                rec.push((k + 1) as f64 / steps as f64, &x);
            }
            Ok(rec.finish(x, steps))
        }
        SolverSpec::Heun2 { steps } => {
            let h = 1.0 / steps as f64;
            for k in 0..steps {
                let t = k as f64 / steps as f64;
                let t_next = (k + 1) as f64 / steps as f64;
                let k1 = eval_checked(field, &x, t)?;
                if k + 1 == steps {
                    x.axpy(h, &k1);
                } else {
                    let pred = combine(&x, h, &[(1.0, &k1)]);
                    let k2 = eval_checked(field, &pred, t_next)?;
                    x = combine(&x, h, &[(0.5, &k1), (0.5, &k2)]);
                }
                rec.push(t_next, &x);
            }
            Ok(rec.finish(x, 2 * steps - 1))
        }
        SolverSpec::Rk45 { rtol, atol, max_nfe } => dopri5(field, x, rtol, atol, max_nfe, rec),
    }
}

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn dopri5(
    field: &(impl VectorField + ?Sized),
    mut x: Matrix,
    rtol: f64,
    atol: f64,
    max_nfe: usize,
    mut rec: Recorder,
) -> Result<Trajectory> {
    // PI controller exponents for an order-5 method
    let alpha = 0.7 / 5.0;
    let beta = 0.4 / 5.0;
    let b5: [f64; 7] = [A[5][0], A[5][1], A[5][2], A[5][3], A[5][4], A[5][5], 0.0];
    let e: Vec<f64> = b5.iter().zip(&B4).map(|(a, b)| a - b).collect();

    let mut t = 0.0f64;
    let mut nfe = 0usize;
    let budget = |nfe: usize, need: usize, rec: &Recorder, x: &Matrix| -> Result<()> {
        if nfe + need > max_nfe {
            let partial = Trajectory {
                times: if rec.keep_states { rec.times.clone() } else { vec![*rec.times.last().unwrap()] },
                states: if rec.keep_states { rec.states.clone() } else { vec![x.clone()] },
                nfe,
            };
            return Err(Error::BudgetExceeded {
                max_nfe,
                partial: Box::new(partial),
            });
        }
        Ok(())
    };
    budget(nfe, 1, &rec, &x)?;
    let mut k1 = eval_checked(field, &x, t)?;
    nfe += 1;
    let mut h = RK45_H0;
    let mut err_prev = 1e-4f64;
    let mut rejected = false;

    while t < 1.0 {
        let last = t + h >= 1.0;
        if last {
            h = 1.0 - t;
        }
        budget(nfe, 6, &rec, &x)?;
        let mut ks: Vec<Matrix> = Vec::with_capacity(7);
        ks.push(k1.clone());
        for s in 0..5 {
            let terms: Vec<(f64, &Matrix)> = (0..=s).map(|j| (A[s][j], &ks[j])).collect();
            let xs = combine(&x, h, &terms);
            ks.push(eval_checked(field, &xs, t + C[s] * h)?);
        }
        let terms: Vec<(f64, &Matrix)> = (0..6).map(|j| (A[5][j], &ks[j])).collect();
        let x_new = combine(&x, h, &terms);
        let t_new = if last { 1.0 } else { t + h };
        ks.push(eval_checked(field, &x_new, t_new)?);
        nfe += 6;

        let mut acc = 0.0;
        let (xs, xn) = (x.as_slice(), x_new.as_slice());
        for i in 0..xs.len() {
            let err_i: f64 = h * (0..7).map(|j| e[j] * ks[j].as_slice()[i]).sum::<f64>();
            let sc = atol + rtol * xs[i].abs().max(xn[i].abs());
            acc += (err_i / sc).powi(2);
        }
        let err = (acc / xs.len().max(1) as f64).sqrt();

        if err <= 1.0 {
            t = t_new;
            x = x_new;
            k1 = ks.pop().expect("seven stages");
            rec.push(t, &x);
            let mut factor = if err == 0.0 {
                RK45_MAX_FACTOR
            } else {
                RK45_SAFETY * err.powf(-alpha) * err_prev.powf(beta)
            };
            factor = factor.clamp(RK45_MIN_FACTOR, RK45_MAX_FACTOR);
            if rejected {
                factor = factor.min(1.0);
            }
            err_prev = err.max(1e-4);
            h *= factor;
            rejected = false;
        } else {
            let factor = if err.is_finite() {
                (RK45_SAFETY * err.powf(-1.0 / 5.0)).max(RK45_MIN_FACTOR)
            } else {
                RK45_MIN_FACTOR
            };
            h *= factor;
            rejected = true;
            if h < 1e-14 {
                return Err(Error::Evaluation(format!("step size underflow at t = {t}")));
            }
        }
    }
    Ok(rec.finish(x, nfe))
}

/// Integrate and keep every accepted state.
pub fn solve(field: &(impl VectorField + ?Sized), x_init: &Matrix, spec: SolverSpec) -> Result<Trajectory> {
    integrate(field, x_init, spec, true)
}

/// Integrate keeping only the endpoint; returns `(x(1), nfe)`.
pub fn solve_endpoint(field: &(impl VectorField + ?Sized), x_init: &Matrix, spec: SolverSpec) -> Result<(Matrix, usize)> {
    let traj = integrate(field, x_init, spec, false)?;
    let nfe = traj.nfe;
    Ok((traj.states.into_iter().next_back().expect("endpoint"), nfe))
}

/// Single-point convenience wrapper around [`solve`].
pub fn solve_one(field: &(impl VectorField + ?Sized), x_init: &[f64], spec: SolverSpec) -> Result<Trajectory> {
    solve(field, &Matrix::row_vector(x_init), spec)
}

fn chunks(x: &Matrix) -> Vec<Matrix> {
    (0..x.rows())
        .step_by(CHUNK_ROWS)
        .map(|start| {
            let end = (start + CHUNK_ROWS).min(x.rows());
            let rows: Vec<&[f64]> = (start..end).map(|i| x.row(i)).collect();
            Matrix::from_rows(&rows, x.cols()).expect("same width")
        })
        .collect()
}

fn stack(parts: &[Matrix], cols: usize) -> Matrix {
    let data: Vec<f64> = parts.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let rows = data.len() / cols.max(1);
    Matrix::from_vec(rows, cols, data).expect("stacked")
}

/// Integrate each [`CHUNK_ROWS`]-row chunk independently (in parallel) and
/// return full trajectories in row order.
pub fn solve_batched(field: &(impl VectorField + ?Sized), x_init: &Matrix, spec: SolverSpec) -> Result<Vec<Trajectory>> {
    chunks(x_init).par_iter().map(|c| solve(field, c, spec)).collect()
}

/// Chunked endpoint integration. The reported NFE is the largest over chunks
/// (all chunks spend the same for fixed-step solvers).
pub fn solve_batched_endpoint(field: &(impl VectorField + ?Sized), x_init: &Matrix, spec: SolverSpec) -> Result<(Matrix, usize)> {
    if x_init.rows() == 0 {
        spec.validate()?;
        return Ok((Matrix::zeros(0, x_init.cols()), 0));
    }
    let parts: Vec<(Matrix, usize)> = chunks(x_init)
        .par_iter()
        .map(|c| solve_endpoint(field, c, spec))
        .collect::<Result<_>>()?;
    let nfe = parts.iter().map(|p| p.1).max().unwrap_or(0);
    let states: Vec<Matrix> = parts.into_iter().map(|p| p.0).collect();
    Ok((stack(&states, x_init.cols()), nfe))
}

/// Conditioning input for sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum KappaInput {
    /// One kappa vector per row (data samples, noise draws or raw embeddings).
    Values(Matrix),
    /// Class labels, looked up in the model's embedding table.
    Labels(Vec<usize>),
}

impl KappaInput {
    pub fn len(&self) -> usize {
        match self {
            KappaInput::Values(m) => m.rows(),
            KappaInput::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draw `n` kappas the way training does: data samples, dataset labels, or
/// fresh noise.
pub fn draw_kappa<R: Rng + ?Sized>(mode: KappaMode, dataset: &Dataset, n: usize, rng: &mut R) -> KappaInput {
    match mode {
        KappaMode::DataSample => KappaInput::Values(dataset.draw_batch(n, rng).x1),
        KappaMode::ClassLabel { .. } => KappaInput::Labels(dataset.draw_batch(n, rng).labels),
        KappaMode::IndependentNoise { dim } => KappaInput::Values(standard_normal_matrix(rng, n, dim)),
    }
}

fn kappa_matrix(model: &FlowModel, kappa: &KappaInput, use_ema: bool) -> Result<Matrix> {
    let source = model
        .source
        .as_ref()
        .ok_or_else(|| Error::config("kappa was given but the model was trained with the independent coupling"))?;
    let want = source.mode.kappa_dim(model.data_dim);
    match kappa {
        KappaInput::Values(m) if m.cols() == want => Ok(m.clone()),
        KappaInput::Values(m) => Err(Error::config(format!(
            "kappa has {} coordinates, the model expects {want}",
            m.cols()
        ))),
        KappaInput::Labels(labels) => {
            let KappaMode::ClassLabel { num_classes, .. } = source.mode else {
                return Err(Error::config(format!(
                    "labels given but the model conditions on {}",
                    source.mode.short_name()
                )));
            };
            if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::config(format!("label {bad} outside [0, {num_classes})")));
            }
            let table = model
                .weights(use_ema)
                .require(&crate::coupling::SourcePredictor::embedding_name())?;
            let rows: Vec<&[f64]> = labels.iter().map(|&l| table.row(l)).collect();
            Matrix::from_rows(&rows, table.cols())
        }
    }
}

/// Initial states: with kappa, `N(w mu(kappa), w Sigma(kappa) + (1 - w) I)`
/// per row; without, `N(0, I)`. One standard-normal matrix is drawn from
/// `rng` either way.
pub fn initial_states<R: Rng + ?Sized>(
    model: &FlowModel,
    n: usize,
    w: f64,
    kappa: Option<&KappaInput>,
    use_ema: bool,
    rng: &mut R,
) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain(format!("w must lie in [0, 1], got {w}")));
    }
    let d = model.data_dim;
    let Some(kappa) = kappa else {
        return Ok(standard_normal_matrix(rng, n, d));
    };
    let k = kappa_matrix(model, kappa, use_ema)?;
    if k.rows() != n {
        return Err(Error::config(format!("{} kappas for {n} samples", k.rows())));
    }
    let source = model.source.as_ref().expect("checked by kappa_matrix");
    let (mean, log_var) = source.predict_batch(model.weights(use_ema), &k)?;
    let eps = standard_normal_matrix(rng, n, d);
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let g = DiagGaussian::new(mean.row(i).to_vec(), log_var.row(i).to_vec())
            .map_err(|e| Error::Evaluation(format!("source prediction: {e}")))?;
        out.row_mut(i).copy_from_slice(&g.mix(w)?.reparameterize(eps.row(i)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub samples: Matrix,
    pub nfe: usize,
}

/// Draw `n` initial states and integrate them to `t = 1`.
pub fn sample_batch<R: Rng + ?Sized>(
    model: &FlowModel,
    n: usize,
    w: f64,
    kappa: Option<&KappaInput>,
    solver: SolverSpec,
    use_ema: bool,
    rng: &mut R,
) -> Result<SampleOutput> {
    solver.validate()?;
    let x0 = initial_states(model, n, w, kappa, use_ema, rng)?;
    let (samples, nfe) = solve_batched_endpoint(&model.field(use_ema), &x0, solver)?;
    Ok(SampleOutput { samples, nfe })
}

/// One sample with EMA weights.
pub fn sample<R: Rng + ?Sized>(
    model: &FlowModel,
    w: f64,
    kappa: Option<&KappaInput>,
    solver: SolverSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(sample_batch(model, 1, w, kappa, solver, true, rng)?.samples.into_vec())
}
