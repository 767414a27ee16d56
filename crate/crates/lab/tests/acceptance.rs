//! Acceptance criteria, run in order on one thread so timing measurements
//! never compete with training for the CPU. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use guided_lora::config::RunConfig;
use guided_lora::SystemClock;
use guided_lora_core::datagen::GmmSpec;
use guided_lora_core::denoiser::{AdapterMode, Denoiser, DenoiserConfig};
use guided_lora_core::diffusion::{
    guidance_combine, sample, GuidanceSpec, NoiseSchedule, SamplerMode, Student, Teacher,
    BENCHMARK_STEPS,
};
use guided_lora_core::distill::{
    distill_loss, distill_loss_and_grads, distill_probe, make_distill_batch,
    run_distillation_observed, train_teacher, TrainLog,
};
use guided_lora_core::eval::{agreement_mse, evaluate, EvalConfig, EvalReport, QUALITY_FACTOR};
use guided_lora_core::lora::{adapter_param_ids, attach_adapters, freeze_base, LayerFilter};
use guided_lora_core::memacct::{
    live_param_census, saving_ratio, table_counts, table_one, FootprintModel,
};
use guided_lora_core::numerics::{AdamConfig, AdamState, Graph, Tensor, Var};
use guided_lora_core::Clock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Suite {
    failed: Vec<u8>,
}

impl Suite {
    fn run(&mut self, id: u8, title: &str, f: impl FnOnce() -> Verdict) {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("criterion {id} PASS: {title}: {d}"),
            Err(d) => {
                println!("criterion {id} FAIL: {title}: {d}");
                self.failed.push(id);
            }
        }
    }
}

// Criterion 1: reported memory figures in GB and the printed savings, with
// the per-row tolerance in percentage points.
const TABLE_ONE_GB: [(f64, f64, f64); 3] =
    [(24.4, -16.2, 0.05), (9.6, 54.2, 0.1), (10.3, 51.0, 0.1)];
const TABLE_ONE_BASELINE_GB: f64 = 21.0;

fn criterion_1() -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for (config, expected, tol) in TABLE_ONE_GB {
        let r = saving_ratio(TABLE_ONE_BASELINE_GB, config).map_err(|e| e.to_string())?;
        ok &= (r - expected).abs() <= tol;
        parts.push(format!("{config} GB -> {r:.3}% (want {expected} +- {tol})"));
    }
    check(ok, parts.join(", "))
}

// Criterion 2 (static half): ordering, trainable share and duplication.
const MAX_TRAINABLE_SHARE: f64 = 0.15;

fn criterion_2_table(cfg: &RunConfig) -> Result<String, String> {
    let d = cfg.distill();
    let rows = table_one(
        &cfg.denoiser(),
        d.rank,
        &d.filter,
        &FootprintModel::default(),
    )
    .map_err(|e| e.to_string())?;
    let (base, naive, lora_distill) = (&rows[0], &rows[1], &rows[3]);
    let share = lora_distill.counts.trainable as f64 / base.counts.base as f64;
    let ok = naive.modeled_bytes > base.modeled_bytes
        && base.modeled_bytes > lora_distill.modeled_bytes
        && share < MAX_TRAINABLE_SHARE
        && lora_distill.counts.duplicated == 0;
    let detail = format!(
        "bytes naive {} > baseline {} > lora-distill {}; trainable {}/{} = {:.2}% (< {}%); duplicated {}",
        naive.modeled_bytes,
        base.modeled_bytes,
        lora_distill.modeled_bytes,
        lora_distill.counts.trainable,
        base.counts.base,
        100.0 * share,
        100.0 * MAX_TRAINABLE_SHARE,
        lora_distill.counts.duplicated
    );
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn adapted_default(cfg: &RunConfig) -> Denoiser {
    let d = cfg.distill();
    let mut m = Denoiser::build(cfg.denoiser(), 0).unwrap();
    attach_adapters(&mut m, d.rank, d.alpha, &d.filter, d.seed).unwrap();
    freeze_base(&mut m);
    m
}

const TEACHER_NFE_50: u64 = 100;
const STUDENT_NFE_50: u64 = 50;

fn criterion_3(cfg: &RunConfig, sched: &NoiseSchedule) -> Verdict {
    let m = adapted_default(cfg);
    let clock = SystemClock::start();
    let g = GuidanceSpec::new(cfg.distill.guidance_s).unwrap();
    let t = sample(
        &Teacher {
            model: &m,
            guidance: g,
        },
        sched,
        BENCHMARK_STEPS,
        2,
        8,
        1,
        0,
        SamplerMode::Deterministic,
        &clock,
    )
    .map_err(|e| e.to_string())?;
    let s = sample(
        &Student { model: &m },
        sched,
        BENCHMARK_STEPS,
        2,
        8,
        1,
        0,
        SamplerMode::Deterministic,
        &clock,
    )
    .map_err(|e| e.to_string())?;
    check(
        t.nfe == TEACHER_NFE_50 && s.nfe == STUDENT_NFE_50,
        format!(
            "{BENCHMARK_STEPS} steps: teacher NFE {}, student NFE {}",
            t.nfe, s.nfe
        ),
    )
}

const TIME_RATIO_LIMIT: f64 = 0.65;
const TIMING_BATCH: usize = 256;
const TIMING_REPEATS: usize = 3;

fn criterion_4(cfg: &RunConfig, sched: &NoiseSchedule) -> Verdict {
    let m = adapted_default(cfg);
    let clock = SystemClock::start();
    let g = GuidanceSpec::new(cfg.distill.guidance_s).unwrap();
    let teacher = Teacher {
        model: &m,
        guidance: g,
    };
    let student = Student { model: &m };
    let (mut tt, mut ts) = (f64::INFINITY, f64::INFINITY);
    for rep in 0..TIMING_REPEATS {
        let seed = rep as u64;
        let mode = SamplerMode::Deterministic;
        let t = sample(
            &teacher,
            sched,
            BENCHMARK_STEPS,
            2,
            TIMING_BATCH,
            1,
            seed,
            mode,
            &clock,
        )
        .map_err(|e| e.to_string())?;
        let s = sample(
            &student,
            sched,
            BENCHMARK_STEPS,
            2,
            TIMING_BATCH,
            1,
            seed,
            mode,
            &clock,
        )
        .map_err(|e| e.to_string())?;
        tt = tt.min(t.wall_clock_s);
        ts = ts.min(s.wall_clock_s);
    }
    let ratio = ts / tt;
    check(
        ratio <= TIME_RATIO_LIMIT,
        format!(
            "batch {TIMING_BATCH}, {BENCHMARK_STEPS} steps, best of {TIMING_REPEATS}: teacher {tt:.3}s, student {ts:.3}s, ratio {ratio:.3} (<= {TIME_RATIO_LIMIT})"
        ),
    )
}

const GUIDANCE_TRIPLES: usize = 1000;

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0usize;
    for _ in 0..GUIDANCE_TRIPLES {
        // Dyadic values keep c - u and s (c - u) exactly representable.
        let u: f64 = rng.random_range(-8192i32..=8192) as f64 / 1024.0;
        let c: f64 = rng.random_range(-8192i32..=8192) as f64 / 1024.0;
        let s: f64 = rng.random_range(0u32..=128) as f64 / 16.0;
        let comb = |s: f64| guidance_combine(&[u], &[c], GuidanceSpec::new(s).unwrap()).unwrap()[0];
        if comb(0.0) != u || comb(1.0) != c || comb(s) - u != s * (c - u) {
            failures += 1;
        }
    }
    check(
        failures == 0,
        format!("{GUIDANCE_TRIPLES} triples, {failures} violations of s=0, s=1 or exact affinity"),
    )
}

const LOSS_IDENTITY_REL_TOL: f64 = 1e-10;

fn criterion_6(
    teacher: &Denoiser,
    cfg: &RunConfig,
    spec: &GmmSpec,
    sched: &NoiseSchedule,
) -> Verdict {
    let d = cfg.distill();
    let probe =
        distill_probe(spec, sched, d.probe_size, d.probe_seed).map_err(|e| e.to_string())?;
    let cond: Vec<Option<usize>> = probe.y.iter().map(|&k| Some(k)).collect();
    let mut mixed = cond.clone();
    for y in mixed.iter_mut().step_by(3) {
        *y = None;
    }
    let before = teacher.predict_noise(&probe.x_t, &probe.t, &mixed).unwrap();
    let mut m = teacher.clone();
    attach_adapters(&mut m, d.rank, d.alpha, &d.filter, d.seed).map_err(|e| e.to_string())?;
    let after = m.predict_noise(&probe.x_t, &probe.t, &mixed).unwrap();
    let bitwise = before
        .values()
        .iter()
        .zip(after.values())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let c = m
        .predict_noise_mode(&probe.x_t, &probe.t, &cond, AdapterMode::Bypass)
        .unwrap();
    let none = vec![None; probe.len()];
    let u = m
        .predict_noise_mode(&probe.x_t, &probe.t, &none, AdapterMode::Bypass)
        .unwrap();
    let gap = c
        .values()
        .iter()
        .zip(u.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / probe.len() as f64;
    let s = d.guidance_s;
    let expected = (s - 1.0) * (s - 1.0) * gap;
    let loss = distill_loss(&m, &probe, GuidanceSpec::new(s).unwrap()).unwrap();
    let rel = (loss - expected).abs() / expected;
    let at_one = distill_loss(&m, &probe, GuidanceSpec::new(1.0).unwrap()).unwrap();
    check(
        bitwise && rel <= LOSS_IDENTITY_REL_TOL && at_one == 0.0,
        format!(
            "outputs bitwise equal: {bitwise}; loss {loss:.6e} vs (s-1)^2 gap {expected:.6e}, rel err {rel:.1e} (<= {LOSS_IDENTITY_REL_TOL:e}); s=1 loss {at_one:e}"
        ),
    )
}

struct Pipeline {
    teacher: Denoiser,
    teacher_losses: Vec<f64>,
    student: Denoiser,
    log: TrainLog,
    census_steps: usize,
    census_mismatches: Vec<String>,
    seconds: f64,
}

fn pipeline(cfg: &RunConfig, spec: &GmmSpec, sched: &NoiseSchedule) -> Pipeline {
    let clock = SystemClock::start();
    let (teacher, teacher_losses) =
        train_teacher(spec, cfg.denoiser(), sched, &cfg.teacher_train()).unwrap();
    println!(
        "  teacher: {} steps, loss {:.4} -> {:.4} ({:.0}s)",
        teacher_losses.len(),
        teacher_losses[0],
        teacher_losses[teacher_losses.len() - 1],
        clock.now_s()
    );
    let d = cfg.distill();
    let analytic = table_counts(&cfg.denoiser(), d.rank, &d.filter)[3];
    let mut student = teacher.clone();
    let mut census_steps = 0;
    let mut census_mismatches = Vec::new();
    let log = run_distillation_observed(&mut student, spec, sched, &d, &clock, &mut |step, m| {
        let c = live_param_census(m);
        census_steps += 1;
        if c.counts() != analytic || c.base_allocations != c.base_tensors {
            census_mismatches.push(format!("step {step}: {:?}", c));
        }
    })
    .unwrap();
    let seconds = clock.now_s();
    println!(
        "  distillation: {} steps, agreement {:.5} -> {:.5} ({seconds:.0}s total)",
        log.losses.len(),
        log.records[0].agreement_mse,
        log.records[log.records.len() - 1].agreement_mse
    );
    Pipeline {
        teacher,
        teacher_losses,
        student,
        log,
        census_steps,
        census_mismatches,
        seconds,
    }
}

fn criterion_2_live(p: &Pipeline, cfg: &RunConfig) -> Verdict {
    let d = cfg.distill();
    let analytic = table_counts(&cfg.denoiser(), d.rank, &d.filter)[3];
    check(
        p.census_mismatches.is_empty() && p.census_steps == d.steps,
        format!(
            "census == analytic {:?} at all {} distillation steps ({} mismatches)",
            analytic,
            p.census_steps,
            p.census_mismatches.len()
        ),
    )
}

const AGREEMENT_FACTOR: f64 = 0.1;
const TEACHER_LOSS_FACTOR: f64 = 0.5;
const SMOOTHING_WINDOW: usize = 100;
const TREND_EARLY_STEP: usize = 100;
const TREND_LATE_STEP: usize = 10_000;

fn criterion_7(p: &Pipeline, cfg: &RunConfig, spec: &GmmSpec, sched: &NoiseSchedule) -> Verdict {
    let mut ok = true;
    let mut lines = Vec::new();

    let n = p.teacher_losses.len();
    let w = SMOOTHING_WINDOW.min(n);
    let t_first = p.teacher_losses[0];
    let t_last = p.teacher_losses[n - w..].iter().sum::<f64>() / w as f64;
    ok &= t_last < TEACHER_LOSS_FACTOR * t_first;
    lines.push(format!("teacher loss first step {t_first:.4} -> last-{w} mean {t_last:.4} (< {TEACHER_LOSS_FACTOR}x)"));

    let a0 = p.log.records[0].agreement_mse;
    let a1 = p.log.records[p.log.records.len() - 1].agreement_mse;
    ok &= a1 <= AGREEMENT_FACTOR * a0;
    lines.push(format!(
        "agreement {a0:.5} -> {a1:.5} = {:.4}x (<= {AGREEMENT_FACTOR}x)",
        a1 / a0
    ));

    let mut changed = Vec::new();
    for (id, param) in p.teacher.params().iter() {
        let now = p.student.params().get(id);
        if now.name() != param.name()
            || now
                .values()
                .iter()
                .zip(param.values())
                .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            changed.push(param.name().to_string());
        }
    }
    ok &= changed.is_empty();
    lines.push(format!("base tensors changed: {}", changed.len()));

    let early = p.log.smoothed_loss(TREND_EARLY_STEP, SMOOTHING_WINDOW);
    let late = p.log.smoothed_loss(TREND_LATE_STEP, SMOOTHING_WINDOW);
    match (early, late) {
        (Some(e), Some(l)) => {
            ok &= l < e;
            lines.push(format!(
                "smoothed loss step {TREND_EARLY_STEP} {e:.5} > step {TREND_LATE_STEP} {l:.5}"
            ));
        }
        _ => {
            ok = false;
            lines.push("smoothed loss unavailable".into());
        }
    }

    let ecfg = EvalConfig {
        guidance_s: cfg.distill.guidance_s,
        ..EvalConfig::default()
    };
    let report: EvalReport = evaluate(&p.student, spec, sched, &ecfg, &SystemClock::start())
        .map_err(|e| e.to_string())?;
    ok &= report.quality_preserved();
    for c in &report.classes {
        lines.push(format!(
            "class {} ED student {:.5} vs {QUALITY_FACTOR} x teacher-teacher {:.5} = {:.5} ({})",
            c.class,
            c.ed_student_teacher,
            c.ed_teacher_teacher,
            QUALITY_FACTOR * c.ed_teacher_teacher,
            if c.passes() { "ok" } else { "over" }
        ));
    }
    lines.push(format!("pipeline {:.0}s", p.seconds));
    check(ok, lines.join("; "))
}

const GRAD_SEEDS: u64 = 20;
const GRAD_H: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

type Build = dyn Fn(&mut Graph<'_>, &[Var]) -> guided_lora_core::Result<Var>;
type Primitive<'a> = (&'a str, &'a [&'a [usize]], Box<Build>);

fn primitive_error(seed: u64, shapes: &[&[usize]], build: &Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::new(s.to_vec(), uniform(&mut rng, s.iter().product())).unwrap())
        .collect();
    let target = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_ref(t)).collect();
        let out = build(&mut g, &vars).unwrap();
        let shape = g.shape(out).to_vec();
        Tensor::new(shape.clone(), uniform(&mut rng, shape.iter().product())).unwrap()
    };
    let loss = |inputs: &[Tensor], grad: bool| {
        let owned: Vec<Tensor> = inputs
            .iter()
            .map(|t| t.clone().with_requires_grad(grad))
            .collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = owned.iter().map(|t| g.input_ref(t)).collect();
        let out = build(&mut g, &vars).unwrap();
        let tgt = g.input_ref(&target);
        let l = g.mse(out, tgt).unwrap();
        let value = g.value(l)[0];
        let grads = grad.then(|| {
            let gr = g.backward(l).unwrap();
            vars.iter()
                .map(|v| gr.wrt(*v).unwrap().to_vec())
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let analytic = loss(&inputs, true).1.unwrap();
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        for (i, a) in grad.iter().enumerate() {
            let mut p = inputs.clone();
            p[k].values_mut()[i] += GRAD_H;
            let mut m = inputs.clone();
            m[k].values_mut()[i] -= GRAD_H;
            worst = worst.max(rel_err(
                *a,
                (loss(&p, false).0 - loss(&m, false).0) / (2.0 * GRAD_H),
            ));
        }
    }
    worst
}

fn small_net() -> DenoiserConfig {
    DenoiserConfig {
        hidden_width: 8,
        num_blocks: 1,
        time_embed_dim: 4,
        cond_embed_dim: 3,
        ..DenoiserConfig::default()
    }
}

fn criterion_8(spec: &GmmSpec, sched: &NoiseSchedule) -> Verdict {
    let prims: [Primitive; 7] = [
        (
            "matmul",
            &[&[3, 4], &[4, 2]],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "matmul_t",
            &[&[3, 4], &[2, 4]],
            Box::new(|g, v| g.matmul_t(v[0], v[1])),
        ),
        ("add", &[&[3, 4], &[4]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul", &[&[3, 4], &[1]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("silu", &[&[3, 4]], Box::new(|g, v| Ok(g.silu(v[0])))),
        (
            "concat",
            &[&[3, 2], &[3, 3]],
            Box::new(|g, v| g.concat(v[0], v[1])),
        ),
        (
            "embedding",
            &[&[4, 3]],
            Box::new(|g, v| g.embedding(v[0], &[3, 0, 3])),
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..GRAD_SEEDS {
        for (_, shapes, build) in &prims {
            worst = worst.max(primitive_error(seed, shapes, build.as_ref()));
        }

        // Full distillation loss, every adapter coordinate.
        let mut m = Denoiser::build(small_net(), seed).unwrap();
        attach_adapters(&mut m, 2, 4.0, &LayerFilter::AdmitsRank, seed).unwrap();
        freeze_base(&mut m);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let ids = adapter_param_ids(&m);
        for &id in &ids {
            let v: Vec<f64> = uniform(&mut rng, m.params().get(id).numel())
                .iter()
                .map(|x| 0.5 * x)
                .collect();
            m.params_mut().set_values(id, &v).unwrap();
        }
        let batch = make_distill_batch(spec, sched, 6, &mut rng).unwrap();
        let g = GuidanceSpec::new(3.0).unwrap();
        let (_, grads) = distill_loss_and_grads(&m, &batch, g).unwrap();
        for &id in &ids {
            let analytic = grads.param(id).unwrap().to_vec();
            for (i, a) in analytic.iter().enumerate() {
                let mut p = m.clone();
                let mut v = p.params().values(id).to_vec();
                v[i] += GRAD_H;
                p.params_mut().set_values(id, &v).unwrap();
                let plus = distill_loss(&p, &batch, g).unwrap();
                v[i] -= 2.0 * GRAD_H;
                p.params_mut().set_values(id, &v).unwrap();
                let minus = distill_loss(&p, &batch, g).unwrap();
                worst = worst.max(rel_err(*a, (plus - minus) / (2.0 * GRAD_H)));
                checked += 1;
            }
        }
    }

    // Frozen parameters: no gradients, no optimizer state, through real steps.
    let mut m = Denoiser::build(small_net(), 7).unwrap();
    attach_adapters(&mut m, 2, 4.0, &LayerFilter::AdmitsRank, 7).unwrap();
    freeze_base(&mut m);
    let mut adam = AdamState::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut leaks = 0usize;
    for _ in 0..25 {
        let batch = make_distill_batch(spec, sched, 16, &mut rng).unwrap();
        let (_, grads) =
            distill_loss_and_grads(&m, &batch, GuidanceSpec::new(3.0).unwrap()).unwrap();
        leaks += m
            .params()
            .iter()
            .filter(|(id, p)| p.is_frozen() && grads.param(*id).is_some())
            .count();
        m.params_mut().accumulate(&grads).unwrap();
        leaks += m
            .params()
            .iter()
            .filter(|(_, p)| p.is_frozen() && p.grad().is_some())
            .count();
        adam.step(m.params_mut()).unwrap();
    }
    leaks += m
        .params()
        .iter()
        .filter(|(id, p)| p.is_frozen() && adam.has_state(*id))
        .count();
    check(
        worst < GRAD_TOL && leaks == 0,
        format!(
            "{GRAD_SEEDS} seeds: 7 primitives + {checked} distillation-loss coordinates, worst rel err {worst:.2e} (< {GRAD_TOL:e}); frozen leaks {leaks}"
        ),
    )
}

fn main() -> ExitCode {
    let cfg = RunConfig::default();
    let spec = cfg.gmm().unwrap();
    let sched = cfg.schedule().unwrap();
    let mut suite = Suite { failed: Vec::new() };

    suite.run(1, "memory saving ratios", criterion_1);
    suite.run(3, "NFE halving at 50 steps", || criterion_3(&cfg, &sched));
    suite.run(4, "student inference time", || criterion_4(&cfg, &sched));
    suite.run(5, "guidance identities", criterion_5);
    suite.run(8, "numerical hygiene", || criterion_8(&spec, &sched));

    println!("  running teacher training and distillation");
    let p = catch_unwind(AssertUnwindSafe(|| pipeline(&cfg, &spec, &sched)));
    let p = p.as_ref().ok();
    suite.run(6, "zero-init identities", || match p {
        Some(p) => criterion_6(&p.teacher, &cfg, &spec, &sched),
        None => Err("pipeline failed".into()),
    });
    suite.run(2, "memory table structure and live census", || {
        let table = criterion_2_table(&cfg)?;
        let live = match p {
            Some(p) => criterion_2_live(p, &cfg)?,
            None => return Err(format!("{table}; pipeline failed")),
        };
        Ok(format!("{table}; {live}"))
    });
    suite.run(7, "distillation efficacy", || match p {
        Some(p) => criterion_7(p, &cfg, &spec, &sched),
        None => Err("pipeline failed".into()),
    });
    if let Some(p) = p {
        let probe = distill_probe(&spec, &sched, 256, 99).unwrap();
        let g = GuidanceSpec::new(cfg.distill.guidance_s).unwrap();
        println!(
            "  held-out agreement on a fresh probe: {:.5}",
            agreement_mse(&p.student, &probe, g).unwrap()
        );
    }

    if suite.failed.is_empty() {
        println!("acceptance: all 8 criteria passed");
        ExitCode::SUCCESS
    } else {
        suite.failed.sort_unstable();
        println!("acceptance: failed criteria {:?}", suite.failed);
        ExitCode::FAILURE
    }
}
