//! Teacher/student agreement, sample-distribution fidelity and class
//! alignment.

use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::{true_log_density, GmmSpec};
use crate::denoiser::Denoiser;
use crate::diffusion::{
    sample, student_predict, teacher_predict, GuidanceSpec, NfeCounter, NoiseSchedule, SamplerMode,
    Student, Teacher, BENCHMARK_STEPS,
};
use crate::distill::{distill_probe, DistillBatch};
use crate::numerics::Tensor;
use crate::{Clock, Error, Result};

/// Student may be at most this many times further (in energy distance)
/// from the teacher than a second, independently seeded teacher sample.
pub const QUALITY_FACTOR: f64 = 1.5;

/// Mean over probes of `||student - teacher||^2`.
pub fn agreement_mse(model: &Denoiser, probe: &DistillBatch, g: GuidanceSpec) -> Result<f64> {
    let mut nfe = NfeCounter::new();
    let teacher = teacher_predict(model, &probe.x_t, &probe.t, &probe.y, g, &mut nfe)?;
    let student = student_predict(model, &probe.x_t, &probe.t, &probe.y, &mut nfe)?;
    let sq: f64 = teacher
        .values()
        .iter()
        .zip(student.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / probe.len() as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn mean_pairwise(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let mut total = 0.0;
    for p in a.chunks_exact(dim) {
        let mut row = 0.0;
        for q in b.chunks_exact(dim) {
            row += dist(p, q);
        }
        total += row;
    }
    total / ((a.len() / dim) * (b.len() / dim)) as f64
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` over all pairs, including each
/// point with itself. Inputs are flat row-major point sets.
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || a.is_empty() || b.is_empty() || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::ShapeMismatch {
            op: "energy_distance",
            lhs: vec![a.len(), dim],
            rhs: vec![b.len(), dim],
        });
    }
    // Fixed argument order makes the result exactly symmetric.
    let (a, b) = if canonical_order(a, b) {
        (a, b)
    } else {
        (b, a)
    };
    let ab = mean_pairwise(a, b, dim);
    let aa = mean_pairwise(a, a, dim);
    let bb = mean_pairwise(b, b, dim);
    Ok(2.0 * ab - aa - bb)
}

fn canonical_order(a: &[f64], b: &[f64]) -> bool {
    use core::cmp::Ordering;
    let by_values = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal);
    a.len().cmp(&b.len()).then(by_values) != Ordering::Greater
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassAlignment {
    pub class: usize,
    /// `||empirical mean - component mean||`.
    pub mean_error: f64,
    /// Share of samples whose nearest component mean is their own class.
    pub nearest_fraction: f64,
    pub mean_log_density: f64,
}

/// Scores each `(class, samples)` set against the mixture it was meant to
/// come from.
pub fn condition_alignment(
    samples: &[(usize, &Tensor)],
    spec: &GmmSpec,
) -> Result<Vec<ClassAlignment>> {
    samples
        .iter()
        .map(|&(class, set)| {
            let mu = spec.mean(class)?;
            let n = set.shape()[0];
            let mut mean = [0.0; 2];
            let mut nearest = 0usize;
            let mut logp = 0.0;
            for i in 0..n {
                let r = set.row(i);
                let x = [r[0], r[1]];
                mean[0] += x[0];
                mean[1] += x[1];
                let closest = spec
                    .means()
                    .iter()
                    .enumerate()
                    .map(|(k, m)| (k + 1, dist(&x, m)))
                    .fold(
                        (0, f64::INFINITY),
                        |best, cur| if cur.1 < best.1 { cur } else { best },
                    )
                    .0;
                if closest == class {
                    nearest += 1;
                }
                logp += true_log_density(spec, x, Some(class))?;
            }
            let nf = n as f64;
            Ok(ClassAlignment {
                class,
                mean_error: dist(&[mean[0] / nf, mean[1] / nf], &mu),
                nearest_fraction: nearest as f64 / nf,
                mean_log_density: logp / nf,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub guidance_s: f64,
    /// Samples per class and per sample set.
    pub n: usize,
    pub steps: usize,
    pub mode: SamplerMode,
    /// Seed of the reference teacher set.
    pub reference_seed: u64,
    /// Seed shared by the calibration teacher set and the student set.
    pub comparison_seed: u64,
    pub probe_size: usize,
    pub probe_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            guidance_s: 3.0,
            n: 2000,
            steps: BENCHMARK_STEPS,
            mode: SamplerMode::Deterministic,
            reference_seed: 1_000,
            comparison_seed: 2_000,
            probe_size: 2048,
            probe_seed: 0xe7a1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    /// Student set vs reference teacher set.
    pub ed_student_teacher: f64,
    /// Calibration teacher set vs reference teacher set.
    pub ed_teacher_teacher: f64,
    /// Student set vs calibration teacher set (same starting noise).
    pub ed_student_teacher_paired: f64,
    pub student: ClassAlignment,
    pub teacher: ClassAlignment,
}

impl ClassReport {
    pub fn passes(&self) -> bool {
        self.ed_student_teacher <= QUALITY_FACTOR * self.ed_teacher_teacher
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub guidance_s: f64,
    pub n: usize,
    pub steps: usize,
    pub agreement_mse: f64,
    pub classes: Vec<ClassReport>,
}

impl EvalReport {
    pub fn is_finite(&self) -> bool {
        self.agreement_mse.is_finite()
            && self.classes.iter().all(|c| {
                [
                    c.ed_student_teacher,
                    c.ed_teacher_teacher,
                    c.ed_student_teacher_paired,
                    c.student.mean_error,
                    c.student.mean_log_density,
                    c.teacher.mean_error,
                    c.teacher.mean_log_density,
                ]
                .iter()
                .all(|v| v.is_finite())
            })
    }

    /// Quality is preserved when every class passes and all metrics are finite.
    pub fn quality_preserved(&self) -> bool {
        self.is_finite() && !self.classes.is_empty() && self.classes.iter().all(ClassReport::passes)
    }
}

/// Samples every class from the teacher (twice, independently seeded) and
/// from the student, and compares them.
pub fn evaluate(
    model: &Denoiser,
    spec: &GmmSpec,
    sched: &NoiseSchedule,
    cfg: &EvalConfig,
    clock: &dyn Clock,
) -> Result<EvalReport> {
    let guidance = GuidanceSpec::new(cfg.guidance_s)?;
    let dim = model.config().data_dim;
    let probe = distill_probe(spec, sched, cfg.probe_size, cfg.probe_seed)?;
    let agreement = agreement_mse(model, &probe, guidance)?;
    let teacher = Teacher { model, guidance };
    let student = Student { model };
    let mut classes = Vec::with_capacity(spec.classes());
    for class in 1..=spec.classes() {
        let draw = |p: &dyn crate::diffusion::NoisePredictor, seed: u64| {
            sample(
                p,
                sched,
                cfg.steps,
                dim,
                cfg.n,
                class,
                seed ^ class as u64,
                cfg.mode,
                clock,
            )
        };
        let reference = draw(&teacher, cfg.reference_seed)?.samples;
        let calibration = draw(&teacher, cfg.comparison_seed)?.samples;
        let students = draw(&student, cfg.comparison_seed)?.samples;
        let align = condition_alignment(&[(class, &students), (class, &reference)], spec)?;
        classes.push(ClassReport {
            class,
            ed_student_teacher: energy_distance(students.values(), reference.values(), dim)?,
            ed_teacher_teacher: energy_distance(calibration.values(), reference.values(), dim)?,
            ed_student_teacher_paired: energy_distance(
                students.values(),
                calibration.values(),
                dim,
            )?,
            student: align[0],
            teacher: align[1],
        });
    }
    Ok(EvalReport {
        guidance_s: cfg.guidance_s,
        n: cfg.n,
        steps: cfg.steps,
        agreement_mse: agreement,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::default_gmm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = [0.1, 0.2, -1.0, 3.0, 2.5, -0.5];
        assert!(energy_distance(&a, &a, 2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn point_masses() {
        let d = 2.5;
        let a = [0.0, 0.0, 0.0, 0.0];
        let b = [d, 0.0];
        assert!((energy_distance(&a, &b, 2).unwrap() - 2.0 * d).abs() < 1e-12);
    }

    #[test]
    fn symmetric() {
        let a = [0.1, 0.2, -1.0, 3.0, 2.5, -0.5];
        let b = [1.0, 1.0, 0.0, -2.0];
        assert_eq!(
            energy_distance(&a, &b, 2).unwrap(),
            energy_distance(&b, &a, 2).unwrap()
        );
        assert!(energy_distance(&[], &b, 2).is_err());
    }

    #[test]
    fn alignment_with_true_and_wrong_sampler() {
        let spec = default_gmm();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1000;
        let sigma = libm::sqrt(0.1);
        for class in 1..=4 {
            let pts: Vec<f64> = spec.sample_component(class, n, &mut rng).unwrap().concat();
            let set = Tensor::new(vec![n, 2], pts).unwrap();
            let wrong = class % 4 + 1;
            let a = condition_alignment(&[(class, &set), (wrong, &set)], &spec).unwrap();
            assert!(a[0].nearest_fraction >= 0.99);
            // per-coordinate 3 sigma / sqrt(n) on both axes
            assert!(
                a[0].mean_error <= 3.0 * sigma / libm::sqrt(n as f64) * core::f64::consts::SQRT_2
            );
            assert!(a[1].nearest_fraction <= 0.01);
        }
    }
}
