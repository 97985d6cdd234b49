//! Adam, weight EMA and the warmup learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::{ParamSource, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over every parameter in `params`.
    ///
    /// Gradients are checked for finiteness before anything is modified, so a
    /// failed step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            if !p.grad.all_finite() {
                return Err(Error::divergence(format!("non-finite gradient in `{name}`")));
            }
            if let Some(m) = self.first_moment.get(name) {
                if m.len() != p.grad.len() {
                    return Err(Error::shape(format!(
                        "optimizer state for `{name}` has {} entries, parameter has {}",
                        m.len(),
                        p.grad.len()
                    )));
                }
            }
        }

        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        for (name, p) in params.iter_mut() {
            let n = p.grad.len();
            let m = self
                .first_moment
                .entry(name.to_owned())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second_moment
                .entry(name.to_owned())
                .or_insert_with(|| vec![0.0; n]);
            let g = p.grad.as_slice();
            let theta = p.value.as_mut_slice();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: BTreeMap<String, Matrix>,
}

impl EmaState {
    /// Shadows start as copies of the current values.
    pub fn new(decay: f64, params: &ParamStore) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config(format!("EMA decay must be in [0, 1), got {decay}")));
        }
        Ok(Self {
            decay,
            shadow: params.values(),
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * value` for every tracked entry.
    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        if self.shadow.len() != params.len() {
            return Err(Error::config(format!(
                "EMA tracks {} parameters, store has {}",
                self.shadow.len(),
                params.len()
            )));
        }
        for (name, s) in &self.shadow {
            let v = params.require(name)?;
            if v.shape() != s.shape() {
                return Err(Error::config(format!(
                    "EMA shadow `{name}` is {:?}, parameter is {:?}",
                    s.shape(),
                    v.shape()
                )));
            }
        }
        let d = self.decay;
        for (name, s) in self.shadow.iter_mut() {
            let v = params.require(name)?;
            for (a, &b) in s.as_mut_slice().iter_mut().zip(v.as_slice()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        Ok(())
    }
}

impl ParamSource for EmaState {
    fn value(&self, name: &str) -> Option<&Matrix> {
        self.shadow.get(name)
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, constant afterwards.
pub fn lr_schedule(step: i64, warmup_steps: i64, base_lr: f64) -> Result<f64> {
    if warmup_steps < 0 {
        return Err(Error::config(format!("warmup_steps must be >= 0, got {warmup_steps}")));
    }
    if step < 0 {
        return Err(Error::config(format!("step must be >= 0, got {step}")));
    }
    if warmup_steps == 0 || step >= warmup_steps {
        return Ok(base_lr);
    }
    Ok(base_lr * step as f64 / warmup_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Matrix::filled(1, 1, v)).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        s.zero_grads();
        s.accumulate_grad("p", &Matrix::filled(1, 1, g)).unwrap();
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        set_grad(&mut s, 1.0);
        let mut adam = Adam::default();
        adam.step(&mut s, 0.1).unwrap();
        // m_hat = 1, v_hat = 1 -> -0.1 / (1 + 1e-8)
        let p = s.value("p").unwrap().get(0, 0);
        assert!((p + 0.1).abs() < 1e-8, "{p}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = scalar_store(1.5);
        set_grad(&mut s, 0.0);
        Adam::default().step(&mut s, 0.1).unwrap();
        assert_eq!(s.value("p").unwrap().get(0, 0), 1.5);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        fn reference(theta0: f64, g: f64, lr: f64, steps: usize) -> f64 {
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            let (mut m, mut v, mut theta) = (0.0, 0.0, theta0);
            for k in 1..=steps {
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(k as i32));
                let vh = v / (1.0 - b2.powi(k as i32));
                theta -= lr * mh / (vh.sqrt() + eps);
            }
            theta
        }
        let mut s = scalar_store(0.3);
        let mut adam = Adam::default();
        for _ in 0..2 {
            set_grad(&mut s, -2.5);
            adam.step(&mut s, 0.01).unwrap();
        }
        let got = s.value("p").unwrap().get(0, 0);
        assert!((got - reference(0.3, -2.5, 0.01, 2)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut s = scalar_store(0.0);
        set_grad(&mut s, f64::NAN);
        let err = Adam::default().step(&mut s, 0.1).unwrap_err();
        match err {
            Error::Divergence { what, .. } => assert!(what.contains("`p`")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.value("p").unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn ema_recurrences() {
        let mut s = scalar_store(0.0);
        let mut ema = EmaState::new(0.9, &s).unwrap();
        s.set_value("p", Matrix::filled(1, 1, 1.0)).unwrap();
        ema.update(&s).unwrap();
        assert!((ema.shadow["p"].get(0, 0) - 0.1).abs() < 1e-15);

        let mut ema0 = EmaState::new(0.0, &scalar_store(-4.0)).unwrap();
        ema0.update(&s).unwrap();
        assert_eq!(ema0.shadow["p"].get(0, 0), 1.0);
    }

    #[test]
    fn ema_geometric_series() {
        let decay: f64 = 0.8;
        let v = 2.5;
        let mut s = scalar_store(0.0);
        let mut ema = EmaState::new(decay, &s).unwrap();
        s.set_value("p", Matrix::filled(1, 1, v)).unwrap();
        for _ in 0..10 {
            ema.update(&s).unwrap();
        }
        let want = v * (1.0 - decay.powi(10));
        assert!((ema.shadow["p"].get(0, 0) - want).abs() < 1e-13);
    }

    #[test]
    fn ema_shape_mismatch_is_config_error() {
        let s = scalar_store(0.0);
        let mut ema = EmaState::new(0.5, &s).unwrap();
        let mut other = ParamStore::new();
        other.insert("p", Matrix::zeros(2, 1)).unwrap();
        assert!(matches!(ema.update(&other), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_ramp() {
        assert_eq!(lr_schedule(0, 100, 2e-4).unwrap(), 0.0);
        assert_eq!(lr_schedule(100, 100, 2e-4).unwrap(), 2e-4);
        assert_eq!(lr_schedule(50, 100, 2e-4).unwrap(), 1e-4);
        assert_eq!(lr_schedule(5000, 100, 2e-4).unwrap(), 2e-4);
        assert_eq!(lr_schedule(0, 0, 2e-4).unwrap(), 2e-4);
        assert!(matches!(lr_schedule(3, -1, 1.0), Err(Error::Config(_))));
    }
}
