//! Labeled 2-D Gaussian mixture corpus with closed-form densities.
//!
//! Class labels run from 1 to K; label 0 is reserved for the null condition
//! inside the denoiser and never appears here.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    means: Vec<Vec2>,
    covs: Vec<Mat2>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    pub x0: Vec2,
    pub y: usize,
}

impl GmmSpec {
    pub fn new(means: Vec<Vec2>, covs: Vec<Mat2>) -> Result<Self> {
        if means.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "a mixture needs at least 2 classes, got {}",
                means.len()
            )));
        }
        if means.len() != covs.len() {
            return Err(Error::InvalidConfig(format!(
                "{} means but {} covariances",
                means.len(),
                covs.len()
            )));
        }
        for (k, c) in covs.iter().enumerate() {
            let symmetric = c[0][1] == c[1][0];
            // 2x2 symmetric matrix is SPD iff leading minors are positive.
            if !symmetric || c[0][0] <= 0.0 || det(c) <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "covariance of class {} is not symmetric positive-definite",
                    k + 1
                )));
            }
        }
        Ok(Self { means, covs })
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    fn index(&self, y: usize) -> Result<usize> {
        if y == 0 || y > self.classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: self.classes(),
            });
        }
        Ok(y - 1)
    }

    pub fn mean(&self, y: usize) -> Result<Vec2> {
        Ok(self.means[self.index(y)?])
    }

    pub fn cov(&self, y: usize) -> Result<Mat2> {
        Ok(self.covs[self.index(y)?])
    }

    pub fn means(&self) -> &[Vec2] {
        &self.means
    }

    /// Draws `n` points from component `y`.
    pub fn sample_component<R: Rng>(&self, y: usize, n: usize, rng: &mut R) -> Result<Vec<Vec2>> {
        let k = self.index(y)?;
        let l = cholesky(&self.covs[k]);
        let mu = self.means[k];
        Ok((0..n)
            .map(|_| {
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                [mu[0] + l[0][0] * z0, mu[1] + l[1][0] * z0 + l[1][1] * z1]
            })
            .collect())
    }

    pub(crate) fn sample_labeled_with<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<LabeledSample> {
        (0..n)
            .map(|_| {
                let y = rng.random_range(1..=self.classes());
                let x0 = self.sample_component(y, 1, rng).expect("label in range")[0];
                LabeledSample { x0, y }
            })
            .collect()
    }

    /// Noise that an ideal epsilon-predictor would output at a step with
    /// cumulative signal fraction `alpha_bar`.
    ///
    /// With a label the target is the single noised component
    /// `N(sqrt(ab) mu, ab Sigma + (1 - ab) I)`; without one it is the
    /// posterior-weighted mixture. Returns `sqrt(1 - ab) * S^-1 (x - sqrt(ab) mu)`
    /// averaged under the component responsibilities.
    pub fn oracle_eps(&self, x: Vec2, alpha_bar: f64, y: Option<usize>) -> Result<Vec2> {
        let sa = libm::sqrt(alpha_bar);
        let sn = libm::sqrt(1.0 - alpha_bar);
        let comp = |k: usize| -> (f64, Vec2) {
            let mu = self.means[k];
            let c = self.covs[k];
            let s = [
                [alpha_bar * c[0][0] + 1.0 - alpha_bar, alpha_bar * c[0][1]],
                [alpha_bar * c[1][0], alpha_bar * c[1][1] + 1.0 - alpha_bar],
            ];
            let d = [x[0] - sa * mu[0], x[1] - sa * mu[1]];
            let inv = inverse(&s);
            let sd = [
                inv[0][0] * d[0] + inv[0][1] * d[1],
                inv[1][0] * d[0] + inv[1][1] * d[1],
            ];
            let logp = gaussian_log_density(d, &s);
            (logp, [sn * sd[0], sn * sd[1]])
        };
        match y {
            Some(y) => Ok(comp(self.index(y)?).1),
            None => {
                let parts: Vec<(f64, Vec2)> = (0..self.classes()).map(comp).collect();
                let max = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                let mut acc = [0.0; 2];
                for (logp, e) in &parts {
                    let w = libm::exp(logp - max);
                    total += w;
                    acc[0] += w * e[0];
                    acc[1] += w * e[1];
                }
                Ok([acc[0] / total, acc[1] / total])
            }
        }
    }
}

/// Four isotropic classes at `(+-2, +-2)` with covariance `0.1 I`. Class
/// `y` and class `(y + 1) % 4 + 1` are mirror images through the origin.
pub fn default_gmm() -> GmmSpec {
    let cov = [[0.1, 0.0], [0.0, 0.1]];
    GmmSpec::new(
        alloc::vec![[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]],
        alloc::vec![cov; 4],
    )
    .expect("canonical spec is valid")
}

/// `n` labeled points, labels uniform over classes. Deterministic per seed.
pub fn sample_labeled(spec: &GmmSpec, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(spec.sample_labeled_with(n, &mut rng))
}

/// Log-density of component `y`, or of the uniform mixture when `y` is `None`.
pub fn true_log_density(spec: &GmmSpec, x: Vec2, y: Option<usize>) -> Result<f64> {
    let comp = |k: usize| {
        let mu = spec.means[k];
        gaussian_log_density([x[0] - mu[0], x[1] - mu[1]], &spec.covs[k])
    };
    match y {
        Some(y) => Ok(comp(spec.index(y)?)),
        None => {
            let logs: Vec<f64> = (0..spec.classes()).map(comp).collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logs.iter().map(|l| libm::exp(l - max)).sum();
            Ok(max + libm::log(sum / spec.classes() as f64))
        }
    }
}

fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

fn inverse(m: &Mat2) -> Mat2 {
    let d = det(m);
    [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
}

fn cholesky(m: &Mat2) -> Mat2 {
    let l00 = libm::sqrt(m[0][0]);
    let l10 = m[1][0] / l00;
    let l11 = libm::sqrt(m[1][1] - l10 * l10);
    [[l00, 0.0], [l10, l11]]
}

/// Log-density of `N(0, cov)` at `d`.
fn gaussian_log_density(d: Vec2, cov: &Mat2) -> f64 {
    let inv = inverse(cov);
    let q =
        d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
    -0.5 * q - libm::log(2.0 * PI) - 0.5 * libm::log(det(cov))
}
