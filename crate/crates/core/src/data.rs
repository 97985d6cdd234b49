//! Synthetic target distributions with class labels.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name")]
pub enum Dataset {
    /// Eight isotropic modes on a circle, label = mode index.
    EightGaussians {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_mode_std")]
        std: f64,
    },
    /// Two interleaved half circles, centered and scaled; label = moon index.
    TwoMoons {
        #[serde(default = "default_moon_noise")]
        noise: f64,
        #[serde(default = "default_moon_scale")]
        scale: f64,
    },
    /// Uniform over the dark cells of a 4x4 board on `[-half_width, half_width]^2`.
    /// Dark cells have even `row + col`, so the parity pair `(row % 2, col % 2)`
    /// is `(0, 0)` or `(1, 1)`; the label is `row % 2`.
    Checkerboard {
        #[serde(default = "default_half_width")]
        half_width: f64,
    },
    /// `N(mu, I)` in `mu.len()` dimensions, single class.
    GaussianShift { mu: Vec<f64> },
}

fn default_radius() -> f64 {
    4.0
}
fn default_mode_std() -> f64 {
    0.3
}
fn default_moon_noise() -> f64 {
    0.1
}
fn default_moon_scale() -> f64 {
    2.0
}
fn default_half_width() -> f64 {
    4.0
}

/// A batch of target points with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x1: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn eight_gaussians() -> Self {
        Dataset::EightGaussians {
            radius: default_radius(),
            std: default_mode_std(),
        }
    }

    pub fn two_moons() -> Self {
        Dataset::TwoMoons {
            noise: default_moon_noise(),
            scale: default_moon_scale(),
        }
    }

    pub fn checkerboard() -> Self {
        Dataset::Checkerboard {
            half_width: default_half_width(),
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            Dataset::EightGaussians { .. } => "8gaussians",
            Dataset::TwoMoons { .. } => "moons",
            Dataset::Checkerboard { .. } => "checkerboard",
            Dataset::GaussianShift { .. } => "gaussian-shift",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Dataset::GaussianShift { mu } => mu.len(),
            _ => 2,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Dataset::EightGaussians { .. } => 8,
            Dataset::TwoMoons { .. } | Dataset::Checkerboard { .. } => 2,
            Dataset::GaussianShift { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Dataset::EightGaussians { radius, std } if *radius <= 0.0 || *std <= 0.0 => {
                Err(Error::config("EightGaussians needs positive radius and std"))
            }
            Dataset::TwoMoons { noise, scale } if *noise < 0.0 || *scale <= 0.0 => {
                Err(Error::config("TwoMoons needs noise >= 0 and scale > 0"))
            }
            Dataset::Checkerboard { half_width } if *half_width <= 0.0 => {
                Err(Error::config("Checkerboard needs a positive half width"))
            }
            Dataset::GaussianShift { mu } if mu.is_empty() => {
                Err(Error::config("GaussianShift needs a non-empty mean"))
            }
            _ => Ok(()),
        }
    }

    /// Mode centers for datasets that have them (used for nearest-mode checks).
    pub fn mode_centers(&self) -> Option<Vec<[f64; 2]>> {
        match self {
            Dataset::EightGaussians { radius, .. } => Some(
                (0..8)
                    .map(|k| {
                        let a = 2.0 * PI * k as f64 / 8.0;
                        [radius * a.cos(), radius * a.sin()]
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    fn draw_one<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) -> usize {
        match self {
            Dataset::EightGaussians { radius, std } => {
                let k = rng.random_range(0..8usize);
                let a = 2.0 * PI * k as f64 / 8.0;
                out[0] = radius * a.cos() + std * rng.sample::<f64, _>(StandardNormal);
                out[1] = radius * a.sin() + std * rng.sample::<f64, _>(StandardNormal);
                k
            }
            Dataset::TwoMoons { noise, scale } => {
                let k = rng.random_range(0..2usize);
                let theta = rng.random_range(0.0..PI);
                let (x, y) = if k == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                out[0] = scale * (x - 0.5) + noise * rng.sample::<f64, _>(StandardNormal);
                out[1] = scale * (y - 0.25) + noise * rng.sample::<f64, _>(StandardNormal);
                k
            }
            Dataset::Checkerboard { half_width } => {
                let cell = half_width / 2.0;
                let idx = rng.random_range(0..8usize);
                let row = idx / 2;
                let col = 2 * (idx % 2) + row % 2;
                let u = Uniform::new(0.0, cell).expect("positive cell");
                out[0] = -half_width + col as f64 * cell + u.sample(rng);
                out[1] = -half_width + row as f64 * cell + u.sample(rng);
                row % 2
            }
            Dataset::GaussianShift { mu } => {
                for (o, m) in out.iter_mut().zip(mu) {
                    *o = m + rng.sample::<f64, _>(StandardNormal);
                }
                0
            }
        }
    }

    /// `batch_size` i.i.d. draws.
    pub fn draw_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        let d = self.dim();
        let mut x1 = Matrix::zeros(batch_size, d);
        let mut labels = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            labels.push(self.draw_one(rng, x1.row_mut(i)));
        }
        Batch { x1, labels }
    }

    /// Analytic mean where it has a short closed form.
    pub fn analytic_mean(&self) -> Vec<f64> {
        match self {
            Dataset::GaussianShift { mu } => mu.clone(),
            Dataset::EightGaussians { .. } | Dataset::Checkerboard { .. } => vec![0.0, 0.0],
            // E[cos] = 0, E[sin] = 2/pi over U(0, pi)
            Dataset::TwoMoons { scale, .. } => {
                let ey = 0.5 * (2.0 / PI) + 0.5 * (0.5 - 2.0 / PI);
                vec![0.0, scale * (ey - 0.25)]
            }
        }
    }
}

/// Write a batch as CSV with columns `x1..xd,label`.
pub fn write_batch_csv<W: Write>(batch: &Batch, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = batch.x1.cols();
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, label) in batch.x1.iter_rows().zip(&batch.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        rec.push(label.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eight_gaussians_modes_are_balanced() {
        let n = 100_000;
        let b = Dataset::eight_gaussians().draw_batch(n, &mut ChaCha8Rng::seed_from_u64(1));
        let mut counts = [0usize; 8];
        for &l in &b.labels {
            counts[l] += 1;
        }
        let p = 1.0 / 8.0;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() < 3.0 * sd, "{counts:?}");
        }
        // points sit near their mode
        let centers = Dataset::eight_gaussians().mode_centers().unwrap();
        for (x, &l) in b.x1.iter_rows().zip(&b.labels).take(1000) {
            let d = ((x[0] - centers[l][0]).powi(2) + (x[1] - centers[l][1]).powi(2)).sqrt();
            assert!(d < 0.3 * 6.0);
        }
    }

    #[test]
    fn gaussian_shift_mean() {
        let n = 100_000;
        let ds = Dataset::GaussianShift { mu: vec![4.0] };
        let b = ds.draw_batch(n, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(ds.dim(), 1);
        let m = b.x1.column_means()[0];
        assert!((m - 4.0).abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn same_seed_same_batch() {
        for ds in [Dataset::eight_gaussians(), Dataset::two_moons(), Dataset::checkerboard()] {
            let a = ds.draw_batch(64, &mut ChaCha8Rng::seed_from_u64(9));
            let b = ds.draw_batch(64, &mut ChaCha8Rng::seed_from_u64(9));
            assert_eq!(a, b);
            assert!(a.labels.iter().all(|&l| l < ds.n_classes()));
        }
    }

    #[test]
    fn checkerboard_hits_only_dark_cells() {
        let b = Dataset::checkerboard().draw_batch(5000, &mut ChaCha8Rng::seed_from_u64(3));
        for (x, &l) in b.x1.iter_rows().zip(&b.labels) {
            assert!(x.iter().all(|v| (-4.0..4.0).contains(v)));
            let col = ((x[0] + 4.0) / 2.0).floor() as usize;
            let row = ((x[1] + 4.0) / 2.0).floor() as usize;
            assert_eq!((row + col) % 2, 0);
            assert_eq!(row % 2, l);
        }
    }

    #[test]
    fn empirical_means_match_analytic() {
        let n = 100_000;
        for ds in [
            Dataset::eight_gaussians(),
            Dataset::two_moons(),
            Dataset::checkerboard(),
            Dataset::GaussianShift { mu: vec![1.0, -2.0] },
        ] {
            let b = ds.draw_batch(n, &mut ChaCha8Rng::seed_from_u64(4));
            let means = b.x1.column_means();
            for (j, (m, want)) in means.iter().zip(ds.analytic_mean()).enumerate() {
                let var: f64 = b.x1.iter_rows().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
                let se = (var / n as f64).sqrt();
                assert!((m - want).abs() < 4.0 * se, "{ds:?} coord {j}: {m} vs {want}");
            }
        }
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let b = Dataset::eight_gaussians().draw_batch(3, &mut ChaCha8Rng::seed_from_u64(0));
        let mut buf = Vec::new();
        write_batch_csv(&b, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "x1,x2,label");
        assert_eq!(lines.len(), 4);
    }
}
