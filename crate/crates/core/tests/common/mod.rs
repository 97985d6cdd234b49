//! Oracles and fixtures shared by the integration suites. Every oracle here
//! is computed independently of the code path it checks.
#![allow(dead_code)]

pub mod runs;

use mixflow::coupling::{CouplingRegime, KappaMode};
use mixflow::data::Dataset;
use mixflow::distributions::DiagGaussian;
use mixflow::flow::{batch_loss_on_tape, FlowModel, KlTarget, ModelConfig};
use mixflow::nn::{Activation, Matrix, ParamStore, Tape, Var};
use mixflow::solvers::{solve_one, FnField, SolverSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Magnitude below which gradient entries are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Largest relative error between backprop and central differences over
/// every scalar in `store`.
pub fn max_grad_error(store: &mut ParamStore, build: &dyn Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    store.zero_grads();
    tape.backward(loss, store).unwrap();
    let analytic: Vec<(String, Matrix)> = store.iter().map(|(n, p)| (n.to_owned(), p.grad.clone())).collect();

    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let l = build(&mut t, s);
        t.scalar(l)
    };
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        for k in 0..grad.len() {
            let orig = store.get(name).unwrap().value.as_slice()[k];
            store.get_mut(name).unwrap().value.as_mut_slice()[k] = orig + FD_STEP;
            let up = eval(store);
            store.get_mut(name).unwrap().value.as_mut_slice()[k] = orig - FD_STEP;
            let down = eval(store);
            store.get_mut(name).unwrap().value.as_mut_slice()[k] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.as_slice()[k], fd));
        }
    }
    worst
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Keep entries at least `gap` away from a kink at `at`.
pub fn avoid(m: &mut Matrix, at: f64, gap: f64) {
    for v in m.as_mut_slice() {
        if (*v - at).abs() < gap {
            *v = at + if *v >= at { gap } else { -gap };
        }
    }
}

/// `mean(out * R)` for a fixed random `R`, so every output entry gets a
/// distinct upstream gradient.
pub fn probe(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = tape.value(out).shape();
    let weights = random_matrix(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), r, c, -1.0, 1.0);
    let w = tape.constant(weights);
    let p = tape.mul(out, w).unwrap();
    tape.mean(p)
}

pub fn store_of(entries: Vec<(&str, Matrix)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, m) in entries {
        s.insert(n, m).unwrap();
    }
    s
}

/// Every differentiable tape operation, each as a seeded random instance.
pub const TAPE_OPS: [&str; 9] = [
    "affine",
    "activation",
    "arithmetic",
    "row_ops",
    "clamp",
    "shape_ops",
    "gather",
    "velocity_mlp",
    "training_loss",
];

/// Worst gradient error of one random instance of operation `op`.
pub fn op_grad_error(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..5usize);
    let d = rng.random_range(1..5usize);
    match op {
        "affine" => {
            let o = rng.random_range(1..5usize);
            let mut store = store_of(vec![
                ("x", random_matrix(&mut rng, n, d, -2.0, 2.0)),
                ("w", random_matrix(&mut rng, o, d, -2.0, 2.0)),
                ("b", random_matrix(&mut rng, 1, o, -2.0, 2.0)),
            ]);
            max_grad_error(&mut store, &move |t, s| {
                let (x, w, b) = (t.param(s, "x").unwrap(), t.param(s, "w").unwrap(), t.param(s, "b").unwrap());
                let y = t.affine(x, w, b).unwrap();
                probe(t, y, seed)
            })
        }
        "activation" => {
            let kind = [Activation::SiLU, Activation::ReLU, Activation::Tanh][rng.random_range(0..3usize)];
            let mut x = random_matrix(&mut rng, n, d, -3.0, 3.0);
            avoid(&mut x, 0.0, 1e-3);
            let mut store = store_of(vec![("x", x)]);
            max_grad_error(&mut store, &move |t, s| {
                let x = t.param(s, "x").unwrap();
                let y = t.activation(x, kind);
                probe(t, y, seed)
            })
        }
        "arithmetic" => {
            let c = rng.random_range(-3.0..3.0);
            let mut store = store_of(vec![
                ("a", random_matrix(&mut rng, n, d, -2.0, 2.0)),
                ("b", random_matrix(&mut rng, n, d, -2.0, 2.0)),
            ]);
            max_grad_error(&mut store, &move |t, s| {
                let (a, b) = (t.param(s, "a").unwrap(), t.param(s, "b").unwrap());
                let sum = t.add(a, b).unwrap();
                let diff = t.sub(a, b).unwrap();
                let prod = t.mul(sum, diff).unwrap();
                let sc = t.scale(prod, c);
                let sh = t.add_scalar(sc, c);
                let e = t.exp(b);
                let y = t.mul(sh, e).unwrap();
                probe(t, y, seed)
            })
        }
        "row_ops" => {
            let scale: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let shift: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            w[0] = 1.0;
            if n > 1 {
                w[1] = 0.0;
            }
            let mut store = store_of(vec![("x", random_matrix(&mut rng, n, d, -3.0, 3.0))]);
            max_grad_error(&mut store, &move |t, s| {
                let x = t.param(s, "x").unwrap();
                let a = t.row_affine(x, &scale, &shift).unwrap();
                let m = t.mix_log_var(x, &w).unwrap();
                let y = t.add(a, m).unwrap();
                probe(t, y, seed)
            })
        }
        "clamp" => {
            let mut x = random_matrix(&mut rng, n, d, -2.0, 2.0);
            avoid(&mut x, -1.0, 1e-3);
            avoid(&mut x, 1.0, 1e-3);
            let mut store = store_of(vec![("x", x)]);
            max_grad_error(&mut store, &move |t, s| {
                let x = t.param(s, "x").unwrap();
                let y = t.clamp(x, -1.0, 1.0);
                probe(t, y, seed)
            })
        }
        "shape_ops" => {
            let d2 = rng.random_range(1..4usize);
            let start = rng.random_range(0..d + d2);
            let len = rng.random_range(1..=d + d2 - start);
            let mut store = store_of(vec![
                ("a", random_matrix(&mut rng, n, d, -2.0, 2.0)),
                ("b", random_matrix(&mut rng, n, d2, -2.0, 2.0)),
            ]);
            max_grad_error(&mut store, &move |t, s| {
                let (a, b) = (t.param(s, "a").unwrap(), t.param(s, "b").unwrap());
                let cat = t.hcat(a, b).unwrap();
                let sq = t.mul(cat, cat).unwrap();
                let cols = t.columns(sq, start, len).unwrap();
                let rows = t.sum_rows(cols);
                let y = probe(t, rows, seed);
                let m = t.mean(cat);
                t.add(y, m).unwrap()
            })
        }
        "gather" => {
            let classes = rng.random_range(1..6usize);
            let idx: Vec<usize> = (0..n + 2).map(|_| rng.random_range(0..classes)).collect();
            let mut store = store_of(vec![("table", random_matrix(&mut rng, classes, d, -2.0, 2.0))]);
            max_grad_error(&mut store, &move |t, s| {
                let table = t.param(s, "table").unwrap();
                let g = t.gather_rows(table, &idx).unwrap();
                let sq = t.mul(g, g).unwrap();
                probe(t, sq, seed)
            })
        }
        "velocity_mlp" => {
            let model = small_model(CouplingRegime::Independent, KappaMode::DataSample, seed);
            let x = random_matrix(&mut rng, 4, 2, -3.0, 3.0);
            let ts: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let mut store = model.params.clone();
            max_grad_error(&mut store, &|t, s| {
                let xv = t.constant(x.clone());
                let y = model.velocity.mlp.forward_tape(t, s, xv, Some(&ts)).unwrap();
                probe(t, y, seed)
            })
        }
        "training_loss" => {
            let regime = [CouplingRegime::Independent, CouplingRegime::KappaFC, CouplingRegime::MixFlow]
                [rng.random_range(0..3usize)];
            let kappa = kappa_modes()[rng.random_range(0..3usize)];
            let target = if rng.random::<bool>() {
                KlTarget::MixedDistribution
            } else {
                KlTarget::UnmixedBase
            };
            loss_grad_error(regime, kappa, target, seed)
        }
        other => panic!("unknown op {other}"),
    }
}

pub fn kappa_modes() -> [KappaMode; 3] {
    [
        KappaMode::DataSample,
        KappaMode::ClassLabel {
            num_classes: 8,
            embed_dim: 3,
        },
        KappaMode::IndependentNoise { dim: 2 },
    ]
}

/// Tiny model with every parameter jittered away from its initializer (the
/// source head starts at zero, which would hide its upstream gradients).
pub fn small_model(regime: CouplingRegime, kappa: KappaMode, seed: u64) -> FlowModel {
    let cfg = ModelConfig {
        hidden_dims: vec![6, 5],
        time_embed_dim: 4,
        source_hidden_dims: vec![5],
        activation: Activation::SiLU,
    };
    let mut m = FlowModel::new(2, regime, kappa, &cfg, 0.9, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for (_, p) in m.params.iter_mut() {
        for v in p.value.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

/// Gradient error of the full training objective (pair draw, interpolation,
/// velocity residual, KL term) with respect to every model parameter.
pub fn loss_grad_error(regime: CouplingRegime, kappa: KappaMode, target: KlTarget, seed: u64) -> f64 {
    let model = small_model(regime, kappa, seed);
    let batch = Dataset::eight_gaussians().draw_batch(5, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut store = model.params.clone();
    max_grad_error(&mut store, &|t, s| {
        let mut m = model.clone();
        m.params = s.clone();
        // same pair, w and t draws on every evaluation
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        batch_loss_on_tape(t, &m, &batch, 0.7, target, &mut rng).unwrap().0.total
    })
}

// ---------------------------------------------------------------------- KL

/// Monte-Carlo `KL(q || N(0, I))` from log-density ratios of `n` draws of
/// `q`. Returns `(estimate, standard error)`.
pub fn kl_monte_carlo(g: &DiagGaussian, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let var: Vec<f64> = g.log_var.iter().map(|l| l.exp()).collect();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut log_ratio = 0.0;
        for ((m, l), v) in g.mean.iter().zip(&g.log_var).zip(&var) {
            let z: f64 = rng.sample(StandardNormal);
            let x = m + v.sqrt() * z;
            // log q(x) - log p(x); the 2 pi terms cancel
            log_ratio += -0.5 * l - 0.5 * z * z + 0.5 * x * x;
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

pub fn random_gaussian(rng: &mut ChaCha8Rng) -> DiagGaussian {
    let d = rng.random_range(1..5usize);
    let mean = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let log_var = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    DiagGaussian::new(mean, log_var).unwrap()
}

// ------------------------------------------------------------ solver orders

pub const ORDER_STEPS: [usize; 5] = [8, 16, 32, 64, 128];

/// `|x(1) - e|` for `dx/dt = x`, `x(0) = 1`.
pub fn exp_error(spec: SolverSpec) -> f64 {
    let field = FnField::new(1, |x: &Matrix, _t: f64| x.clone());
    let traj = solve_one(&field, &[1.0], spec).unwrap();
    (traj.final_state().get(0, 0) - std::f64::consts::E).abs()
}

/// Least-squares slope of `log err` against `log h`.
pub fn fitted_order(make: impl Fn(usize) -> SolverSpec) -> f64 {
    let pts: Vec<(f64, f64)> = ORDER_STEPS
        .iter()
        .map(|&n| ((1.0 / n as f64).ln(), exp_error(make(n)).ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

// ------------------------------------------------------------- statistics

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Kolmogorov-Smirnov statistic of `xs` against `N(0, 1)`.
pub fn ks_statistic(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at significance 0.01.
pub fn ks_critical_001(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
