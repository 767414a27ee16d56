//! Teacher pretraining with condition dropout, and LoRA-enhanced
//! distillation of the guided two-pass prediction into a one-pass student
//! that shares the teacher's base weights.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datagen::GmmSpec;
use crate::denoiser::{AdapterMode, Denoiser, DenoiserConfig};
use crate::diffusion::{q_sample, teacher_predict, GuidanceSpec, NfeCounter, NoiseSchedule};
use crate::eval::agreement_mse;
use crate::lora::{attach_adapters, freeze_base, LayerFilter};
use crate::numerics::{AdamConfig, AdamState, Gradients, Graph, Tensor};
use crate::{Clock, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of replacing the label with the null condition.
    pub p_uncond: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 256,
            p_uncond: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Learning-rate schedule over a distillation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrDecay {
    Constant,
    /// Half-cosine from `lr` at the first step down to zero after the last.
    Cosine,
}

impl LrDecay {
    /// Learning rate for 1-based `step` of `steps`.
    pub fn lr_at(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrDecay::Constant => lr,
            LrDecay::Cosine => {
                let frac = (step - 1) as f64 / steps as f64;
                0.5 * lr * (1.0 + libm::cos(core::f64::consts::PI * frac))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub guidance_s: f64,
    pub rank: usize,
    pub alpha: f64,
    pub filter: LayerFilter,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub seed: u64,
    pub eval_every: usize,
    pub probe_size: usize,
    pub probe_seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            guidance_s: 3.0,
            rank: 8,
            alpha: 8.0,
            filter: LayerFilter::AdmitsRank,
            steps: 20_000,
            batch_size: 64,
            lr: 1e-3,
            lr_decay: LrDecay::Cosine,
            seed: 0,
            eval_every: 1000,
            probe_size: 2048,
            probe_seed: 0x5eed_0b5e,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub agreement_mse: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Interval records; steps strictly increase.
    pub records: Vec<LogRecord>,
    /// Loss at every optimizer step, index 0 is step 1.
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the `window` steps ending at `step` (1-based).
    pub fn smoothed_loss(&self, step: usize, window: usize) -> Option<f64> {
        if step == 0 || step > self.losses.len() || window == 0 {
            return None;
        }
        let lo = step.saturating_sub(window);
        let w = &self.losses[lo..step];
        Some(w.iter().sum::<f64>() / w.len() as f64)
    }
}

/// Noisy inputs with their step indices and class labels. Labels are
/// always real classes, never the null condition.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch {
    pub x_t: Tensor,
    pub t: Vec<usize>,
    pub y: Vec<usize>,
}

impl DistillBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

struct NoisedBatch {
    batch: DistillBatch,
    eps: Vec<f64>,
}

fn noised_batch<R: Rng>(
    spec: &GmmSpec,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut R,
) -> Result<NoisedBatch> {
    let samples = spec.sample_labeled_with(n, rng);
    let mut x_t = Vec::with_capacity(2 * n);
    let mut eps = Vec::with_capacity(2 * n);
    let mut t = Vec::with_capacity(n);
    for s in &samples {
        let step = rng.random_range(1..=sched.steps());
        let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        x_t.extend(q_sample(&s.x0, step, &e, sched)?);
        eps.extend_from_slice(&e);
        t.push(step);
    }
    Ok(NoisedBatch {
        batch: DistillBatch {
            x_t: Tensor::new(vec![n, 2], x_t)?,
            t,
            y: samples.iter().map(|s| s.y).collect(),
        },
        eps,
    })
}

/// `x_0` from the data, `t` uniform over the schedule, `eps ~ N(0, I)`.
pub fn make_distill_batch<R: Rng>(
    spec: &GmmSpec,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut R,
) -> Result<DistillBatch> {
    Ok(noised_batch(spec, sched, n, rng)?.batch)
}

/// Held-out probe set drawn by the distillation recipe from its own seed.
pub fn distill_probe(
    spec: &GmmSpec,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<DistillBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_distill_batch(spec, sched, n, &mut rng)
}

fn check_compatible(data: &GmmSpec, net: &DenoiserConfig, sched: &NoiseSchedule) -> Result<()> {
    if net.data_dim != 2 || net.num_classes != data.classes() || net.timesteps != sched.steps() {
        return Err(Error::InvalidConfig(alloc::format!(
            "model expects data_dim={}, {} classes, T={}; data has 2 dims and {} classes, schedule T={}",
            net.data_dim,
            net.num_classes,
            net.timesteps,
            data.classes(),
            sched.steps()
        )));
    }
    Ok(())
}

/// Denoising loss for one teacher batch and its gradients.
pub(crate) fn teacher_batch_loss(
    model: &Denoiser,
    x_t: &Tensor,
    t: &[usize],
    y: &[Option<usize>],
    eps: &[f64],
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let x = g.input_ref(x_t);
    let pred = model.forward(&mut g, x, t, y, AdapterMode::Active)?;
    let target = g.constant(x_t.shape().to_vec(), eps.to_vec())?;
    let loss = g.mse(pred, target)?;
    let value = g.value(loss)[0];
    Ok((value, g.backward(loss)?))
}

/// Trains a fresh denoiser on `E ||eps - eps(x_t, t, y~)||^2` where `y~` is
/// the null condition with probability `p_uncond`. Returns the model and the
/// per-step loss (mean over batch and coordinates).
pub fn train_teacher(
    data: &GmmSpec,
    net_cfg: DenoiserConfig,
    sched: &NoiseSchedule,
    cfg: &TeacherTrainConfig,
) -> Result<(Denoiser, Vec<f64>)> {
    check_compatible(data, &net_cfg, sched)?;
    if !(0.0..1.0).contains(&cfg.p_uncond) {
        return Err(Error::InvalidConfig(alloc::format!(
            "p_uncond must be in [0, 1), got {}",
            cfg.p_uncond
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut model = Denoiser::build(net_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(cfg.adam);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let nb = noised_batch(data, sched, cfg.batch_size, &mut rng)?;
        let y: Vec<Option<usize>> = nb
            .batch
            .y
            .iter()
            .map(|&k| {
                if rng.random::<f64>() < cfg.p_uncond {
                    None
                } else {
                    Some(k)
                }
            })
            .collect();
        let (loss, grads) = teacher_batch_loss(&model, &nb.batch.x_t, &nb.batch.t, &y, &nb.eps)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        model.params.accumulate(&grads)?;
        adam.step(&mut model.params)?;
        losses.push(loss);
    }
    Ok((model, losses))
}

/// Runs the adapter-bypassed teacher on `batch` and returns its guided
/// prediction, the distillation target.
fn teacher_target(model: &Denoiser, batch: &DistillBatch, g: GuidanceSpec) -> Result<Tensor> {
    let mut nfe = NfeCounter::new();
    teacher_predict(model, &batch.x_t, &batch.t, &batch.y, g, &mut nfe)
}

/// Mean over the batch of `||student - teacher||^2`, with gradients for the
/// trainable parameters. The teacher target enters as a constant.
pub fn distill_loss_and_grads(
    model: &Denoiser,
    batch: &DistillBatch,
    g: GuidanceSpec,
) -> Result<(f64, Gradients)> {
    if !model.has_adapters() {
        return Err(Error::NoAdapters);
    }
    let target = teacher_target(model, batch, g)?;
    let cond: Vec<Option<usize>> = batch.y.iter().map(|&k| Some(k)).collect();
    let mut graph = Graph::new();
    let x = graph.input_ref(&batch.x_t);
    let student = model.forward(&mut graph, x, &batch.t, &cond, AdapterMode::Active)?;
    let target = graph.input(target);
    let per_coord = graph.mse(student, target)?;
    let dim = graph.scalar(model.config().data_dim as f64);
    let loss = graph.mul(per_coord, dim)?;
    let value = graph.value(loss)[0];
    Ok((value, graph.backward(loss)?))
}

pub fn distill_loss(model: &Denoiser, batch: &DistillBatch, g: GuidanceSpec) -> Result<f64> {
    Ok(distill_loss_and_grads(model, batch, g)?.0)
}

/// Attaches adapters to `model`, freezes every base parameter and trains
/// only the adapters so one adapted pass matches the guided two-pass
/// teacher. The teacher is the same model evaluated with adapters bypassed.
pub fn run_distillation(
    model: &mut Denoiser,
    data: &GmmSpec,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    clock: &dyn Clock,
) -> Result<TrainLog> {
    run_distillation_observed(model, data, sched, cfg, clock, &mut |_, _| {})
}

/// [`run_distillation`] with a callback after every optimizer step.
pub fn run_distillation_observed(
    model: &mut Denoiser,
    data: &GmmSpec,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    clock: &dyn Clock,
    observer: &mut dyn FnMut(usize, &Denoiser),
) -> Result<TrainLog> {
    check_compatible(data, model.config(), sched)?;
    let guidance = GuidanceSpec::new(cfg.guidance_s)?;
    if cfg.batch_size == 0 || cfg.eval_every == 0 || cfg.probe_size == 0 {
        return Err(Error::InvalidConfig(
            "batch size, eval interval and probe size must be positive".into(),
        ));
    }
    let start = clock.now_s();
    attach_adapters(model, cfg.rank, cfg.alpha, &cfg.filter, cfg.seed)?;
    freeze_base(model);
    let probe = distill_probe(data, sched, cfg.probe_size, cfg.probe_seed)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);

    let mut log = TrainLog::default();
    log.records.push(LogRecord {
        step: 0,
        loss: distill_loss(model, &probe, guidance)?,
        agreement_mse: agreement_mse(model, &probe, guidance)?,
        elapsed_s: clock.now_s() - start,
    });
    for step in 1..=cfg.steps {
        let batch = make_distill_batch(data, sched, cfg.batch_size, &mut rng)?;
        adam.config.lr = cfg.lr_decay.lr_at(cfg.lr, step, cfg.steps);
        let (loss, grads) = distill_loss_and_grads(model, &batch, guidance)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        model.params.accumulate(&grads)?;
        adam.step(&mut model.params)?;
        log.losses.push(loss);
        observer(step, model);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            log.records.push(LogRecord {
                step,
                loss,
                agreement_mse: agreement_mse(model, &probe, guidance)?,
                elapsed_s: clock.now_s() - start,
            });
        }
    }
    Ok(log)
}
