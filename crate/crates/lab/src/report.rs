//! CSV and plain-text renderings of logs, samples, memory tables and
//! evaluation results. Every number is printed with `{:?}` so text and CSV
//! carry identical, round-trippable values.

use std::fmt::Write as _;
use std::path::Path;

use guided_lora_core::distill::TrainLog;
use guided_lora_core::eval::{EvalReport, QUALITY_FACTOR};
use guided_lora_core::memacct::{Census, MemoryReport, ParamCounts};
use guided_lora_core::numerics::Tensor;

use crate::{LabError, Result};

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

pub fn teacher_log_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{l:?}", i + 1);
    }
    out
}

pub fn train_log_csv(log: &TrainLog) -> String {
    let mut out = String::from("step,loss,agreement_mse,elapsed_s\n");
    for r in &log.records {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?}",
            r.step, r.loss, r.agreement_mse, r.elapsed_s
        );
    }
    out
}

/// One `x0 x1 y` line per sample.
pub fn samples_text(samples: &Tensor, class: usize) -> String {
    let mut out = String::from("# x0 x1 y\n");
    let n = samples.shape()[0];
    for i in 0..n {
        let r = samples.row(i);
        let coords: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{} {class}", coords.join(" "));
    }
    out
}

pub fn memory_csv(rows: &[MemoryReport]) -> String {
    let mut out = String::from("config,base,adapters,duplicated,trainable,bytes,saving_pct\n");
    for r in rows {
        let c = r.counts;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:?},{:?}",
            r.config,
            c.base,
            c.adapters,
            c.duplicated,
            c.trainable,
            r.modeled_bytes,
            r.saving_ratio
        );
    }
    out
}

pub fn memory_table(rows: &[MemoryReport]) -> String {
    let mut out = format!(
        "{:<14} {:>10} {:>9} {:>10} {:>10} {:>12} {:>9}\n",
        "config", "base", "adapters", "duplicated", "trainable", "bytes", "saving_%"
    );
    for r in rows {
        let c = r.counts;
        let _ = writeln!(
            out,
            "{:<14} {:>10} {:>9} {:>10} {:>10} {:>12?} {:>9.1}",
            r.config,
            c.base,
            c.adapters,
            c.duplicated,
            c.trainable,
            r.modeled_bytes,
            r.saving_ratio
        );
    }
    out
}

/// Compares a live census against analytic counts. `Err` lists every
/// field that differs.
pub fn census_check(analytic: &ParamCounts, census: &Census) -> std::result::Result<(), String> {
    let live = census.counts();
    let mut diffs = Vec::new();
    let fields = [
        ("base", analytic.base, live.base),
        ("adapters", analytic.adapters, live.adapters),
        ("duplicated", analytic.duplicated, live.duplicated),
        ("trainable", analytic.trainable, live.trainable),
        (
            "base_allocations",
            census.base_tensors,
            census.base_allocations,
        ),
    ];
    for (name, want, got) in fields {
        if want != got {
            diffs.push(format!("{name}: analytic {want}, actual {got}"));
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(diffs.join("; "))
    }
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "class,ed_student_teacher,ed_teacher_teacher,ed_student_teacher_paired,passes,\
         student_mean_error,student_nearest_fraction,student_mean_log_density,\
         teacher_mean_error,teacher_nearest_fraction,teacher_mean_log_density\n",
    );
    for c in &report.classes {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            c.class,
            c.ed_student_teacher,
            c.ed_teacher_teacher,
            c.ed_student_teacher_paired,
            c.passes(),
            c.student.mean_error,
            c.student.nearest_fraction,
            c.student.mean_log_density,
            c.teacher.mean_error,
            c.teacher.nearest_fraction,
            c.teacher.mean_log_density,
        );
    }
    out
}

pub fn eval_summary(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "guidance_s = {:?}", report.guidance_s);
    let _ = writeln!(
        out,
        "samples per set = {}, steps = {}",
        report.n, report.steps
    );
    let _ = writeln!(out, "agreement_mse = {:?}", report.agreement_mse);
    for c in &report.classes {
        let _ = writeln!(
            out,
            "class {}: student-teacher {:.5}, teacher-teacher {:.5}, limit {:.5} -> {}",
            c.class,
            c.ed_student_teacher,
            c.ed_teacher_teacher,
            QUALITY_FACTOR * c.ed_teacher_teacher,
            if c.passes() { "ok" } else { "FAIL" }
        );
    }
    let verdict = if report.quality_preserved() {
        "preserved"
    } else {
        "NOT preserved"
    };
    let _ = writeln!(out, "quality {verdict}");
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: String,
    pub steps: usize,
    pub nfe: u64,
    pub wall_clock_s: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("mode,steps,nfe,wall_clock_s\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:?}", r.mode, r.steps, r.nfe, r.wall_clock_s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use guided_lora_core::denoiser::DenoiserConfig;
    use guided_lora_core::lora::LayerFilter;
    use guided_lora_core::memacct::{table_one, FootprintModel};

    #[test]
    fn csv_and_table_agree() {
        let rows = table_one(
            &DenoiserConfig::default(),
            8,
            &LayerFilter::AdmitsRank,
            &FootprintModel::default(),
        )
        .unwrap();
        let csv = memory_csv(&rows);
        let table = memory_table(&rows);
        for r in &rows {
            let bytes = format!("{:?}", r.modeled_bytes);
            assert!(csv.contains(&bytes) && table.contains(&bytes));
        }
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(
            csv.lines()
                .filter(|l| l.ends_with(|c: char| c.is_ascii_digit()) && l.contains(",-"))
                .count(),
            1
        );
    }

    #[test]
    fn census_mismatch_lists_fields() {
        let analytic = ParamCounts {
            base: 10,
            adapters: 4,
            duplicated: 0,
            trainable: 4,
        };
        let census = Census {
            base: 10,
            adapter: 5,
            frozen: 10,
            trainable: 5,
            base_tensors: 2,
            base_allocations: 2,
        };
        let err = census_check(&analytic, &census).unwrap_err();
        assert!(err.contains("adapters: analytic 4, actual 5"));
        assert!(err.contains("trainable"));
        assert!(!err.contains("base:"));
    }

    #[test]
    fn samples_format() {
        let t = Tensor::from_rows(&[[1.0, -0.5], [0.25, 2.0]]).unwrap();
        assert_eq!(samples_text(&t, 3), "# x0 x1 y\n1.0 -0.5 3\n0.25 2.0 3\n");
    }
}
