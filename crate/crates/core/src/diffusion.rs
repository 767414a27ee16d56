//! Variance schedule, forward noising, classifier-free guidance and the
//! reverse-process samplers, with exact accounting of network evaluations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datagen::GmmSpec;
use crate::denoiser::{AdapterMode, Denoiser};
use crate::numerics::Tensor;
use crate::{Clock, Error, Result};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
/// Inference iterations used for every timing and quality comparison.
pub const BENCHMARK_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear betas from `beta_min` to `beta_max` over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "schedule needs T >= 1 and 0 < beta_min <= beta_max < 1, got T={steps}, [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        beta_min,
        beta_max,
        betas,
        alphas,
        alpha_bars,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                steps: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }

    /// The `(beta_min, beta_max)` the schedule was built from.
    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `steps` evenly spaced step indices ending at `T`, ascending.
    pub fn inference_steps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::InvalidConfig(format!(
                "inference steps must be in [1, {total}], got {steps}"
            )));
        }
        Ok((1..=steps).map(|i| i * total / steps).collect())
    }
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: vec![x0.len()],
            rhs: vec![eps.len()],
        });
    }
    let ab = sched.alpha_bar(t)?;
    let (sa, sn) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect())
}

/// Guidance weight `s` of classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSpec {
    s: f64,
}

impl GuidanceSpec {
    pub fn new(s: f64) -> Result<Self> {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "guidance weight must be finite and >= 0, got {s}"
            )));
        }
        Ok(Self { s })
    }

    pub fn s(&self) -> f64 {
        self.s
    }
}

/// `eps_uncond + s (eps_cond - eps_uncond)`.
///
/// `s = 1` returns `eps_cond` directly; the general form can be off by an
/// ulp there. `s = 0` and `eps_cond == eps_uncond` are exact as written.
pub fn guidance_combine(eps_uncond: &[f64], eps_cond: &[f64], g: GuidanceSpec) -> Result<Vec<f64>> {
    if eps_uncond.len() != eps_cond.len() {
        return Err(Error::ShapeMismatch {
            op: "guidance_combine",
            lhs: vec![eps_uncond.len()],
            rhs: vec![eps_cond.len()],
        });
    }
    let s = g.s;
    if s == 1.0 {
        return Ok(eps_cond.to_vec());
    }
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| u + s * (c - u))
        .collect())
}

/// Running count of denoiser evaluations. One call on a batch counts once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NfeCounter(u64);

impl NfeCounter {
    pub fn new() -> Self {
        Self(0)
    }

    pub fn count(&self) -> u64 {
        self.0
    }

    fn bump(&mut self) {
        self.0 += 1;
    }
}

/// Evaluates the network once, counting the evaluation.
fn evaluate(
    model: &Denoiser,
    x_t: &Tensor,
    t: &[usize],
    y: &[Option<usize>],
    mode: AdapterMode,
    nfe: &mut NfeCounter,
) -> Result<Tensor> {
    nfe.bump();
    model.predict_noise_mode(x_t, t, y, mode)
}

/// Conditional and unconditional passes with adapters bypassed, combined
/// with guidance. Exactly two evaluations.
pub fn teacher_predict(
    model: &Denoiser,
    x_t: &Tensor,
    t: &[usize],
    y: &[usize],
    g: GuidanceSpec,
    nfe: &mut NfeCounter,
) -> Result<Tensor> {
    let cond: Vec<Option<usize>> = y.iter().map(|&k| Some(k)).collect();
    let none = vec![None; y.len()];
    let eps_c = evaluate(model, x_t, t, &cond, AdapterMode::Bypass, nfe)?;
    let eps_u = evaluate(model, x_t, t, &none, AdapterMode::Bypass, nfe)?;
    let combined = guidance_combine(eps_u.values(), eps_c.values(), g)?;
    Tensor::new(eps_c.shape().to_vec(), combined)
}

/// One conditional pass through the adapted model.
pub fn student_predict(
    model: &Denoiser,
    x_t: &Tensor,
    t: &[usize],
    y: &[usize],
    nfe: &mut NfeCounter,
) -> Result<Tensor> {
    if !model.has_adapters() {
        return Err(Error::NoAdapters);
    }
    let cond: Vec<Option<usize>> = y.iter().map(|&k| Some(k)).collect();
    evaluate(model, x_t, t, &cond, AdapterMode::Active, nfe)
}

/// Anything that maps a noisy batch to a noise estimate.
pub trait NoisePredictor {
    fn predict(
        &self,
        x_t: &Tensor,
        t: &[usize],
        y: &[usize],
        nfe: &mut NfeCounter,
    ) -> Result<Tensor>;
}

/// Two-pass guided prediction from the base weights.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'m> {
    pub model: &'m Denoiser,
    pub guidance: GuidanceSpec,
}

impl NoisePredictor for Teacher<'_> {
    fn predict(
        &self,
        x_t: &Tensor,
        t: &[usize],
        y: &[usize],
        nfe: &mut NfeCounter,
    ) -> Result<Tensor> {
        teacher_predict(self.model, x_t, t, y, self.guidance, nfe)
    }
}

/// One-pass prediction through the adapters.
#[derive(Debug, Clone, Copy)]
pub struct Student<'m> {
    pub model: &'m Denoiser,
}

impl NoisePredictor for Student<'_> {
    fn predict(
        &self,
        x_t: &Tensor,
        t: &[usize],
        y: &[usize],
        nfe: &mut NfeCounter,
    ) -> Result<Tensor> {
        student_predict(self.model, x_t, t, y, nfe)
    }
}

/// Exact noise predictor for a known Gaussian mixture, optionally guided.
/// Counts one evaluation per call, or two when guided.
#[derive(Debug, Clone, Copy)]
pub struct GmmOracle<'a> {
    pub spec: &'a GmmSpec,
    pub sched: &'a NoiseSchedule,
    pub guidance: Option<GuidanceSpec>,
}

impl NoisePredictor for GmmOracle<'_> {
    fn predict(
        &self,
        x_t: &Tensor,
        t: &[usize],
        y: &[usize],
        nfe: &mut NfeCounter,
    ) -> Result<Tensor> {
        let mut out = Vec::with_capacity(x_t.numel());
        for (i, (&step, &label)) in t.iter().zip(y).enumerate() {
            let row = x_t.row(i);
            let x = [row[0], row[1]];
            let ab = self.sched.alpha_bar(step)?;
            let c = self.spec.oracle_eps(x, ab, Some(label))?;
            match self.guidance {
                None => out.extend_from_slice(&c),
                Some(g) => {
                    let u = self.spec.oracle_eps(x, ab, None)?;
                    out.extend(guidance_combine(&u, &c, g)?);
                }
            }
        }
        nfe.bump();
        if self.guidance.is_some() {
            nfe.bump();
        }
        Tensor::new(x_t.shape().to_vec(), out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// DDPM posterior sampling with fresh noise at every step.
    Ancestral,
    /// DDIM with `eta = 0`: no noise after the initial draw.
    Deterministic,
}

impl core::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(Self::Ancestral),
            "deterministic" => Ok(Self::Deterministic),
            other => Err(Error::InvalidConfig(format!(
                "unknown sampler mode `{other}` (expected ancestral or deterministic)"
            ))),
        }
    }
}

impl core::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Ancestral => "ancestral",
            Self::Deterministic => "deterministic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    /// `(n, data_dim)`.
    pub samples: Tensor,
    pub nfe: u64,
    pub wall_clock_s: f64,
}

/// Runs the reverse process for `n` points of class `y` over `steps`
/// evenly spaced steps of `sched`, starting from `x_T ~ N(0, I)`.
///
/// Both modes use the DDIM update on the step subsequence; ancestral mode
/// sets `eta = 1`, which is the DDPM posterior, and deterministic mode sets
/// `eta = 0`. The whole batch goes through the predictor in one call per
/// step.
#[allow(clippy::too_many_arguments)]
pub fn sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    steps: usize,
    data_dim: usize,
    n: usize,
    y: usize,
    seed: u64,
    mode: SamplerMode,
    clock: &dyn Clock,
) -> Result<SampleRun> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be positive".into()));
    }
    let schedule = sched.inference_steps(steps)?;
    let start = clock.now_s();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n * data_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let labels = vec![y; n];
    let eta = match mode {
        SamplerMode::Ancestral => 1.0,
        SamplerMode::Deterministic => 0.0,
    };
    let mut nfe = NfeCounter::new();
    for i in (0..schedule.len()).rev() {
        let t = schedule[i];
        let ab = sched.alpha_bar(t)?;
        let ab_prev = if i == 0 {
            1.0
        } else {
            sched.alpha_bar(schedule[i - 1])?
        };
        let x_t = Tensor::new(vec![n, data_dim], x)?;
        let eps = predictor.predict(&x_t, &vec![t; n], &labels, &mut nfe)?;
        let mut x_next = x_t.into_values();
        let sigma = eta * libm::sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev));
        let dir = libm::sqrt((1.0 - ab_prev - sigma * sigma).max(0.0));
        let (sa, sn, sa_prev) = (libm::sqrt(ab), libm::sqrt(1.0 - ab), libm::sqrt(ab_prev));
        for (xv, &e) in x_next.iter_mut().zip(eps.values()) {
            let x0 = (*xv - sn * e) / sa;
            let mut v = sa_prev * x0 + dir * e;
            if sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v += sigma * z;
            }
            *xv = v;
        }
        x = x_next;
    }
    Ok(SampleRun {
        samples: Tensor::new(vec![n, data_dim], x)?,
        nfe: nfe.count(),
        wall_clock_s: clock.now_s() - start,
    })
}
