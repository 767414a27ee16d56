use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use guided_lora::checkpoint::{
    load_student, load_teacher, save_adapters, save_teacher, AdapterMeta,
};
use guided_lora::config::RunConfig;
use guided_lora::report::{self, BenchRow};
use guided_lora::{LabError, Result, SystemClock};
use guided_lora_core::datagen::sample_labeled;
use guided_lora_core::diffusion::{
    sample, GuidanceSpec, NoisePredictor, SamplerMode, Student, Teacher, BENCHMARK_STEPS,
};
use guided_lora_core::distill::{run_distillation, train_teacher};
use guided_lora_core::eval::{evaluate, EvalConfig};
use guided_lora_core::lora::count_adapter_params;
use guided_lora_core::memacct::{live_param_census, table_counts, table_one};

#[derive(Parser)]
#[command(
    name = "guided-lora",
    version,
    about = "Guidance distillation into LoRA adapters on a toy diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the class-conditional teacher with condition dropout.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill guided sampling into adapters on top of a frozen teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples from the guided teacher or, with --adapters, the student.
    Sample {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = BENCHMARK_STEPS)]
        steps: usize,
        #[arg(long, default_value = "deterministic")]
        mode: SamplerMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Guidance weight; required for teacher sampling.
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the analytic memory table; --live also checks a real model.
    ReportMemory {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 2, value_names = ["TEACHER", "ADAPTERS"])]
        live: Option<Vec<PathBuf>>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare student and teacher samples; exit 0 iff quality is preserved.
    Eval {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        adapters: PathBuf,
        #[arg(long)]
        guidance: f64,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = BENCHMARK_STEPS)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time teacher and student sampling on one batch.
    Bench {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        adapters: PathBuf,
        #[arg(long, default_value_t = 1)]
        class: usize,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = BENCHMARK_STEPS)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write labeled points from the data mixture as `x0 x1 y` lines.
    ExportData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainTeacher { config, out } => train_teacher_cmd(&config, &out),
        Command::Distill {
            teacher,
            config,
            out,
        } => distill_cmd(&teacher, &config, &out),
        Command::Sample {
            teacher,
            adapters,
            class,
            n,
            steps,
            mode,
            seed,
            guidance,
            out,
        } => sample_cmd(
            &teacher,
            adapters.as_deref(),
            class,
            n,
            steps,
            mode,
            seed,
            guidance,
            &out,
        ),
        Command::ReportMemory { config, live, out } => {
            report_memory_cmd(&config, live.as_deref(), out.as_deref())
        }
        Command::Eval {
            teacher,
            adapters,
            guidance,
            n,
            steps,
            out,
        } => eval_cmd(&teacher, &adapters, guidance, n, steps, &out),
        Command::Bench {
            teacher,
            adapters,
            class,
            n,
            steps,
            out,
        } => bench_cmd(&teacher, &adapters, class, n, steps, out.as_deref()),
        Command::ExportData {
            config,
            n,
            seed,
            out,
        } => export_cmd(config.as_deref(), n, seed, &out),
    }
}

fn gmm(cfg: &RunConfig, path: &Path) -> Result<guided_lora_core::datagen::GmmSpec> {
    cfg.gmm().map_err(|message| LabError::Config {
        path: path.to_path_buf(),
        message,
    })
}

fn train_teacher_cmd(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let spec = gmm(&cfg, config)?;
    let sched = cfg.schedule()?;
    let (model, losses) = train_teacher(&spec, cfg.denoiser(), &sched, &cfg.teacher_train())?;
    let hash = save_teacher(out, &model, &sched)?;
    report::write_file(
        &out.join("train_log.csv"),
        &report::teacher_log_csv(&losses),
    )?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("initial loss = {first:?}");
        println!("final loss = {last:?}");
    }
    println!("teacher hash = {hash}");
    Ok(())
}

fn distill_cmd(teacher: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let spec = gmm(&cfg, config)?;
    let loaded = load_teacher(teacher)?;
    let mismatch = |what: &str, a: String, b: String| LabError::Config {
        path: config.to_path_buf(),
        message: format!(
            "{what} in config ({a}) does not match teacher {} ({b})",
            teacher.display()
        ),
    };
    if cfg.denoiser() != *loaded.model.config() {
        return Err(mismatch(
            "model",
            format!("{:?}", cfg.denoiser()),
            format!("{:?}", loaded.model.config()),
        ));
    }
    let sched = cfg.schedule()?;
    if sched != loaded.schedule {
        return Err(mismatch(
            "schedule",
            format!("{:?}", sched.beta_range()),
            format!("{:?}", loaded.schedule.beta_range()),
        ));
    }
    if let Some(want) = &cfg.distill.teacher_hash {
        if *want != loaded.hash {
            return Err(mismatch("distill.teacher_hash", want.clone(), loaded.hash));
        }
    }
    let dcfg = cfg.distill();
    let mut model = loaded.model;
    let log = run_distillation(&mut model, &spec, &sched, &dcfg, &SystemClock::start())?;
    save_adapters(
        out,
        &model,
        &AdapterMeta {
            guidance_s: dcfg.guidance_s,
            rank: dcfg.rank,
            alpha: dcfg.alpha,
            teacher_hash: loaded.hash,
        },
    )?;
    report::write_file(&out.join("train_log.csv"), &report::train_log_csv(&log))?;
    let trainable: usize = model.params().trainable().map(|(_, p)| p.numel()).sum();
    println!("trainable parameters = {trainable}");
    println!(
        "analytic adapter parameters = {}",
        count_adapter_params(model.config(), dcfg.rank, &dcfg.filter)
    );
    if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
        println!("initial agreement mse = {:?}", first.agreement_mse);
        println!("final agreement mse = {:?}", last.agreement_mse);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    teacher: &Path,
    adapters: Option<&Path>,
    class: usize,
    n: usize,
    steps: usize,
    mode: SamplerMode,
    seed: u64,
    guidance: Option<f64>,
    out: &Path,
) -> Result<()> {
    let clock = SystemClock::start();
    let run = match adapters {
        Some(adapters) => {
            let s = load_student(teacher, adapters)?;
            let dim = s.model.config().data_dim;
            sample(
                &Student { model: &s.model },
                &s.schedule,
                steps,
                dim,
                n,
                class,
                seed,
                mode,
                &clock,
            )?
        }
        None => {
            let s = guidance
                .ok_or_else(|| LabError::Usage("teacher sampling needs --guidance".into()))?;
            let t = load_teacher(teacher)?;
            let p = Teacher {
                model: &t.model,
                guidance: GuidanceSpec::new(s)?,
            };
            sample(
                &p,
                &t.schedule,
                steps,
                t.model.config().data_dim,
                n,
                class,
                seed,
                mode,
                &clock,
            )?
        }
    };
    report::write_file(out, &report::samples_text(&run.samples, class))?;
    println!("nfe = {}", run.nfe);
    println!("wall_clock_s = {:?}", run.wall_clock_s);
    Ok(())
}

fn report_memory_cmd(config: &Path, live: Option<&[PathBuf]>, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let net = cfg.denoiser();
    let filter = cfg.distill().filter;
    let rows = table_one(&net, cfg.distill.rank, &filter, &cfg.footprint())?;
    print!("{}", report::memory_table(&rows));
    if let Some(out) = out {
        report::write_file(out, &report::memory_csv(&rows))?;
    }
    if let Some([teacher, adapters]) = live {
        let student = load_student(teacher, adapters)?;
        let analytic = table_counts(student.model.config(), student.meta.rank, &filter)[3];
        let census = live_param_census(&student.model);
        report::census_check(&analytic, &census)
            .map_err(|d| LabError::Failed(format!("census mismatch: {d}")))?;
        println!("analytic == actual");
    }
    Ok(())
}

fn eval_cmd(
    teacher: &Path,
    adapters: &Path,
    guidance: f64,
    n: usize,
    steps: usize,
    out: &Path,
) -> Result<()> {
    let student = load_student(teacher, adapters)?;
    if guidance != student.meta.guidance_s {
        return Err(LabError::Usage(format!(
            "--guidance {guidance} does not match the adapters' guidance_s {}",
            student.meta.guidance_s
        )));
    }
    let spec = guided_lora_core::datagen::default_gmm();
    let cfg = EvalConfig {
        guidance_s: guidance,
        n,
        steps,
        ..EvalConfig::default()
    };
    let report = evaluate(
        &student.model,
        &spec,
        &student.schedule,
        &cfg,
        &SystemClock::start(),
    )?;
    report::write_file(out, &report::eval_csv(&report))?;
    print!("{}", report::eval_summary(&report));
    if !report.is_finite() {
        return Err(LabError::Failed("non-finite metric in evaluation".into()));
    }
    if !report.quality_preserved() {
        return Err(LabError::Failed(
            "quality-preservation criterion failed".into(),
        ));
    }
    Ok(())
}

fn bench_cmd(
    teacher: &Path,
    adapters: &Path,
    class: usize,
    n: usize,
    steps: usize,
    out: Option<&Path>,
) -> Result<()> {
    let s = load_student(teacher, adapters)?;
    let clock = SystemClock::start();
    let dim = s.model.config().data_dim;
    let t = Teacher {
        model: &s.model,
        guidance: GuidanceSpec::new(s.meta.guidance_s)?,
    };
    let st = Student { model: &s.model };
    let runs: [(&str, &dyn NoisePredictor); 2] = [("teacher", &t), ("student", &st)];
    let mut rows = Vec::new();
    for (mode, p) in runs {
        let run = sample(
            p,
            &s.schedule,
            steps,
            dim,
            n,
            class,
            0,
            SamplerMode::Deterministic,
            &clock,
        )?;
        rows.push(BenchRow {
            mode: mode.into(),
            steps,
            nfe: run.nfe,
            wall_clock_s: run.wall_clock_s,
        });
    }
    let csv = report::bench_csv(&rows);
    print!("{csv}");
    println!(
        "student/teacher time = {:.3}",
        rows[1].wall_clock_s / rows[0].wall_clock_s
    );
    if let Some(out) = out {
        report::write_file(out, &csv)?;
    }
    Ok(())
}

fn export_cmd(config: Option<&Path>, n: usize, seed: u64, out: &Path) -> Result<()> {
    let spec = match config {
        Some(path) => gmm(&RunConfig::load(path)?, path)?,
        None => guided_lora_core::datagen::default_gmm(),
    };
    let data = sample_labeled(&spec, n, seed)?;
    let mut text = String::from("# x0_0 x0_1 y\n");
    for s in &data {
        text.push_str(&format!("{:?} {:?} {}\n", s.x0[0], s.x0[1], s.y));
    }
    report::write_file(out, &text)
}
