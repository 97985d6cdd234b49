//! Evaluation of frozen models: trajectory curvature, degree of
//! intersection of a coupling, and the empirical 2-Wasserstein distance.

mod assignment;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use assignment::solve_assignment;

use crate::coupling::draw_pairs_on_tape;
use crate::data::Dataset;
use crate::distributions::standard_normal_matrix;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::{Matrix, Tape};
use crate::solvers::{draw_kappa, sample_batch, solve_batched, SolverSpec, Trajectory, VectorField, CHUNK_ROWS};

pub const DEFAULT_CURVATURE_N: usize = 10_000;
pub const DEFAULT_CURVATURE_STEPS: usize = 128;
pub const MAX_EXACT_W2: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub mean_curvature: f64,
    pub n_trajectories: usize,
    pub solver: SolverSpec,
    /// Mean squared residual at each left grid point; empty when the grid
    /// is not shared by all trajectories (adaptive solver).
    pub per_t_profile: Vec<f64>,
}

fn eval_finite(field: &(impl VectorField + ?Sized), x: &Matrix, t: f64) -> Result<Matrix> {
    let v = field.eval(x, t).map_err(|e| match e {
        Error::Evaluation(_) => e,
        other => Error::Evaluation(other.to_string()),
    })?;
    if !v.all_finite() {
        return Err(Error::Evaluation(format!("non-finite velocity at t = {t}")));
    }
    Ok(v)
}

/// Row sums of `|x1 - x0 - v|^2` added into `acc`.
fn residual_rows(x0: &Matrix, x1: &Matrix, v: &Matrix) -> Vec<f64> {
    let d = x0.cols();
    (0..x0.rows())
        .map(|i| {
            let (a, b, c) = (x0.row(i), x1.row(i), v.row(i));
            (0..d).map(|k| (b[k] - a[k] - c[k]).powi(2)).sum()
        })
        .collect()
}

/// `(sum over rows of the per-grid-point residual, grid times)` for one chunk.
fn trajectory_residuals(field: &(impl VectorField + ?Sized), traj: &Trajectory) -> Result<Vec<f64>> {
    let (x0, x1) = (traj.initial_state(), traj.final_state());
    let k = traj.times.len() - 1;
    (0..k)
        .map(|i| {
            let v = eval_finite(field, &traj.states[i], traj.times[i])?;
            Ok(residual_rows(x0, x1, &v).iter().sum())
        })
        .collect()
}

/// Curvature of generated trajectories: for `x0 ~ N(0, I)` integrate to `x1`
/// and average `|x1 - x0 - v(x_t, t)|^2` over the solver's left grid points
/// `t_0 .. t_{k-1}`, `x_t` taken from the same trajectory.
pub fn curvature<R: Rng + ?Sized>(
    field: &(impl VectorField + ?Sized),
    n: usize,
    solver: SolverSpec,
    rng: &mut R,
) -> Result<CurvatureReport> {
    if n == 0 {
        return Err(Error::Input("curvature needs n >= 1".into()));
    }
    let x0 = standard_normal_matrix(rng, n, field.dim());
    let trajs = solve_batched(field, &x0, solver).map_err(|e| match e {
        Error::BudgetExceeded { .. } | Error::Config(_) => e,
        other => Error::Evaluation(other.to_string()),
    })?;
    let sums: Vec<Vec<f64>> = trajs
        .par_iter()
        .map(|tr| trajectory_residuals(field, tr))
        .collect::<Result<_>>()?;

    let shared_grid = trajs.windows(2).all(|w| w[0].times == w[1].times);
    let mut total = 0.0;
    for (tr, s) in trajs.iter().zip(&sums) {
        // each trajectory weighs equally: average its own grid first
        total += s.iter().sum::<f64>() / s.len() as f64;
        debug_assert_eq!(s.len() + 1, tr.times.len());
    }
    let mean_curvature = total / n as f64;
    let per_t_profile = if shared_grid {
        let k = sums[0].len();
        (0..k).map(|i| sums.iter().map(|s| s[i]).sum::<f64>() / n as f64).collect()
    } else {
        Vec::new()
    };
    if !mean_curvature.is_finite() {
        return Err(Error::Evaluation("non-finite curvature".into()));
    }
    Ok(CurvatureReport {
        mean_curvature,
        n_trajectories: n,
        solver,
        per_t_profile,
    })
}

/// Curvature with the defaults: 10000 trajectories, Euler with 128 steps.
pub fn curvature_default<R: Rng + ?Sized>(field: &(impl VectorField + ?Sized), rng: &mut R) -> Result<CurvatureReport> {
    curvature(
        field,
        DEFAULT_CURVATURE_N,
        SolverSpec::Euler {
            steps: DEFAULT_CURVATURE_STEPS,
        },
        rng,
    )
}

/// Degree of intersection of a coupling under `field`: the mean of
/// `|x1 - x0 - v(x_t, t)|^2` over `n` pairs and the midpoint grid
/// `t_j = (j + 1/2) / t_grid`, with `x_t` the forward interpolation.
pub fn degree_of_intersection<R, S>(
    field: &(impl VectorField + ?Sized),
    mut sampler: S,
    n: usize,
    t_grid: usize,
    rng: &mut R,
) -> Result<f64>
where
    R: Rng + ?Sized,
    S: FnMut(usize, &mut R) -> Result<(Matrix, Matrix)>,
{
    if n == 0 || t_grid == 0 {
        return Err(Error::Input("degree of intersection needs n >= 1 and t_grid >= 1".into()));
    }
    let (x0, x1) = sampler(n, rng)?;
    if x0.shape() != x1.shape() || x0.rows() != n || x0.cols() != field.dim() {
        return Err(Error::shape(format!(
            "sampler returned {:?} and {:?} for {n} pairs of dimension {}",
            x0.shape(),
            x1.shape(),
            field.dim()
        )));
    }
    let starts: Vec<usize> = (0..n).step_by(CHUNK_ROWS).collect();
    let total: f64 = starts
        .par_iter()
        .map(|&s| {
            let e = (s + CHUNK_ROWS).min(n);
            let a = Matrix::from_rows(&(s..e).map(|i| x0.row(i)).collect::<Vec<_>>(), x0.cols())?;
            let b = Matrix::from_rows(&(s..e).map(|i| x1.row(i)).collect::<Vec<_>>(), x1.cols())?;
            let mut acc = 0.0;
            for j in 0..t_grid {
                let t = (j as f64 + 0.5) / t_grid as f64;
                let xt = a.zip_map(&b, |p, q| t * q + (1.0 - t) * p);
                let v = eval_finite(field, &xt, t)?;
                acc += residual_rows(&a, &b, &v).iter().sum::<f64>();
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / (n * t_grid) as f64)
}

/// Pair sampler drawing `(x0, x1)` from `model`'s own training coupling.
pub fn model_coupling_sampler<'a, R: Rng + ?Sized>(
    model: &'a FlowModel,
    dataset: &'a Dataset,
    use_ema: bool,
) -> impl FnMut(usize, &mut R) -> Result<(Matrix, Matrix)> + 'a {
    let params = if use_ema { model.ema_store() } else { model.params.clone() };
    move |n, rng| {
        let batch = dataset.draw_batch(n, rng);
        let mut tape = Tape::new();
        let draw = draw_pairs_on_tape(&mut tape, model.regime, model.source.as_ref(), &params, &batch, None, rng)?;
        Ok((tape.value(draw.x0).clone(), batch.x1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum W2Method {
    /// Optimal matching between equally sized sets.
    ExactAssignment,
    /// Average of 1-D squared distances over random unit directions,
    /// rescaled by the dimension so isotropic Gaussian pairs agree with the
    /// exact distance.
    Sliced { n_projections: usize, seed: u64 },
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Empirical 2-Wasserstein distance with squared-Euclidean ground cost.
pub fn wasserstein2(a: &Matrix, b: &Matrix, method: W2Method) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Input(format!("dimension mismatch: {} vs {}", a.cols(), b.cols())));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Input("W2 needs non-empty sample sets".into()));
    }
    if !a.all_finite() || !b.all_finite() {
        return Err(Error::Input("samples must be finite".into()));
    }
    match method {
        W2Method::ExactAssignment => {
            let n = a.rows();
            if b.rows() != n {
                return Err(Error::Input(format!(
                    "exact assignment needs equal sizes, got {n} and {}",
                    b.rows()
                )));
            }
            if n > MAX_EXACT_W2 {
                return Err(Error::Input(format!("exact assignment supports at most {MAX_EXACT_W2} points, got {n}")));
            }
            let mut cost = vec![0.0; n * n];
            cost.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                for (j, c) in row.iter_mut().enumerate() {
                    *c = sq_dist(a.row(i), b.row(j));
                }
            });
            let matching = solve_assignment(&cost, n);
            let total: f64 = matching.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            Ok((total / n as f64).max(0.0).sqrt())
        }
        W2Method::Sliced { n_projections, seed } => {
            if n_projections == 0 {
                return Err(Error::Input("sliced W2 needs at least one projection".into()));
            }
            let d = a.cols();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dirs: Vec<Vec<f64>> = (0..n_projections)
                .map(|_| loop {
                    let v = standard_normal_matrix(&mut rng, 1, d).into_vec();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        break v.into_iter().map(|x| x / norm).collect();
                    }
                })
                .collect();
            let project = |m: &Matrix, dir: &[f64]| -> Vec<f64> {
                let mut p: Vec<f64> = m.iter_rows().map(|r| r.iter().zip(dir).map(|(x, y)| x * y).sum()).collect();
                p.sort_by(f64::total_cmp);
                p
            };
            let mean: f64 = dirs
                .par_iter()
                .map(|dir| w2_squared_1d(&project(a, dir), &project(b, dir)))
                .collect::<Vec<_>>()
                .iter()
                .sum::<f64>()
                / n_projections as f64;
            Ok((d as f64 * mean).max(0.0).sqrt())
        }
    }
}

/// Squared W2 between two sorted 1-D empirical measures with uniform
/// weights, by walking both quantile functions.
fn w2_squared_1d(x: &[f64], y: &[f64]) -> f64 {
    let (n, m) = (x.len(), y.len());
    if n == m {
        return x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    }
    let (wx, wy) = (1.0 / n as f64, 1.0 / m as f64);
    let (mut i, mut j) = (0, 0);
    let (mut rx, mut ry) = (wx, wy);
    let mut total = 0.0;
    while i < n && j < m {
        let mass = rx.min(ry);
        total += mass * (x[i] - y[j]).powi(2);
        rx -= mass;
        ry -= mass;
        if rx <= 1e-15 {
            i += 1;
            rx = wx;
        }
        if ry <= 1e-15 {
            j += 1;
            ry = wy;
        }
    }
    total
}

/// Mean over the grid and rows of `|(x_{i+1} - x_i) / dt - (x1 - x0)|^2`;
/// 0 for trajectories with fewer than two points.
pub fn straightness_profile(traj: &Trajectory) -> f64 {
    if traj.times.len() < 2 {
        return 0.0;
    }
    let (x0, x1) = (traj.initial_state(), traj.final_state());
    let (rows, d) = x0.shape();
    let k = traj.times.len() - 1;
    let mut total = 0.0;
    for i in 0..k {
        let dt = traj.times[i + 1] - traj.times[i];
        let (s, s1) = (&traj.states[i], &traj.states[i + 1]);
        for r in 0..rows {
            total += (0..d)
                .map(|c| ((s1.get(r, c) - s.get(r, c)) / dt - (x1.get(r, c) - x0.get(r, c))).powi(2))
                .sum::<f64>();
        }
    }
    total / (k * rows.max(1)) as f64
}

/// Generate `n` samples from `model` (kappa drawn from the dataset when
/// `with_kappa`) and compare them to `n` fresh dataset points.
///
/// Reference points use stream 0 of `seed`, sampling uses stream 1.
#[allow(clippy::too_many_arguments)]
pub fn sample_w2(
    model: &FlowModel,
    dataset: &Dataset,
    n: usize,
    w: f64,
    with_kappa: bool,
    solver: SolverSpec,
    method: W2Method,
    seed: u64,
) -> Result<(f64, usize)> {
    let mut ref_rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = dataset.draw_batch(n, &mut ref_rng).x1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let kappa = match (with_kappa, model.kappa_mode()) {
        (true, Some(mode)) => Some(draw_kappa(mode, dataset, n, &mut rng)),
        (true, None) => return Err(Error::config("kappa requested for a model without a source predictor")),
        (false, _) => None,
    };
    let out = sample_batch(model, n, w, kappa.as_ref(), solver, true, &mut rng)?;
    Ok((wasserstein2(&out.samples, &reference, method)?, out.nfe))
}

/// Serialized evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub solver: Option<SolverSpec>,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}
