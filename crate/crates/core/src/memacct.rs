//! Parameter and memory accounting for four training configurations:
//! plain training, naive distillation (a full trainable student copy next to
//! a frozen teacher), LoRA fine-tuning, and LoRA-enhanced distillation where
//! teacher and student share one frozen base.

use alloc::string::String;
use alloc::vec::Vec;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::lora::{adapter_param_ids, count_adapter_params, LayerFilter};
use crate::{Error, Result};

/// Parameter-driven byte model. Activations and runtime overhead are not
/// modeled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootprintModel {
    pub bytes_per_param: f64,
    /// Optimizer slots per trainable parameter (two for Adam).
    pub optimizer_state_multiplier: f64,
    /// Gradient slots per trainable parameter.
    pub gradient_multiplier: f64,
    /// Reserved; has no effect on the byte formula yet.
    pub include_inference_only: bool,
}

impl Default for FootprintModel {
    fn default() -> Self {
        Self {
            bytes_per_param: 4.0,
            optimizer_state_multiplier: 2.0,
            gradient_multiplier: 1.0,
            include_inference_only: false,
        }
    }
}

impl FootprintModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.bytes_per_param,
            self.optimizer_state_multiplier,
            self.gradient_multiplier,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "footprint multipliers must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub base: usize,
    pub adapters: usize,
    /// Extra full copy of the base held by a naive distillation student.
    pub duplicated: usize,
    pub trainable: usize,
}

/// Stored parameters at `bytes_per_param`, plus gradient and optimizer
/// slots for every trainable one.
pub fn footprint(counts: &ParamCounts, model: &FootprintModel) -> f64 {
    let bpp = model.bytes_per_param;
    let stored = (counts.base + counts.adapters + counts.duplicated) as f64;
    let per_trainable = model.gradient_multiplier + model.optimizer_state_multiplier;
    bpp * stored + counts.trainable as f64 * bpp * per_trainable
}

/// `100 (baseline - config) / baseline`.
pub fn saving_ratio(baseline_bytes: f64, config_bytes: f64) -> Result<f64> {
    if baseline_bytes.is_nan() || baseline_bytes <= 0.0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "baseline memory must be positive, got {baseline_bytes}"
        )));
    }
    Ok(100.0 * (baseline_bytes - config_bytes) / baseline_bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub config: String,
    pub counts: ParamCounts,
    pub modeled_bytes: f64,
    /// Percent saved relative to the first (baseline) row.
    pub saving_ratio: f64,
}

pub const ROW_NAMES: [&str; 4] = ["baseline", "naive-distill", "lora", "lora-distill"];

/// Analytic counts for the four configurations.
pub fn table_counts(
    net_cfg: &DenoiserConfig,
    rank: usize,
    filter: &LayerFilter,
) -> [ParamCounts; 4] {
    let p = net_cfg.base_param_count();
    let l = count_adapter_params(net_cfg, rank, filter);
    [
        ParamCounts {
            base: p,
            adapters: 0,
            duplicated: 0,
            trainable: p,
        },
        ParamCounts {
            base: p,
            adapters: 0,
            duplicated: p,
            trainable: p,
        },
        ParamCounts {
            base: p,
            adapters: l,
            duplicated: 0,
            trainable: l,
        },
        // Shares the base with its teacher: the teacher's second
        // evaluation costs compute, not parameters.
        ParamCounts {
            base: p,
            adapters: l,
            duplicated: 0,
            trainable: l,
        },
    ]
}

pub fn table_one(
    net_cfg: &DenoiserConfig,
    rank: usize,
    filter: &LayerFilter,
    model: &FootprintModel,
) -> Result<Vec<MemoryReport>> {
    model.validate()?;
    let counts = table_counts(net_cfg, rank, filter);
    let baseline = footprint(&counts[0], model);
    counts
        .iter()
        .zip(ROW_NAMES)
        .map(|(c, name)| {
            let bytes = footprint(c, model);
            Ok(MemoryReport {
                config: name.into(),
                counts: *c,
                modeled_bytes: bytes,
                saving_ratio: saving_ratio(baseline, bytes)?,
            })
        })
        .collect()
}

/// Unique-parameter census of a live model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Census {
    /// Scalars in non-adapter parameters.
    pub base: usize,
    pub adapter: usize,
    pub frozen: usize,
    pub trainable: usize,
    /// Distinct base tensors (one per base parameter name).
    pub base_tensors: usize,
    /// Distinct memory buffers backing those tensors.
    pub base_allocations: usize,
}

impl Census {
    /// Counts in the shape [`table_counts`] uses. Duplicates are base
    /// tensors beyond one buffer per name.
    pub fn counts(&self) -> ParamCounts {
        ParamCounts {
            base: self.base,
            adapters: self.adapter,
            duplicated: 0,
            trainable: self.trainable,
        }
    }
}

/// Walks the model's parameter store. Buffers are identified by address, so
/// two tensors aliasing one allocation would count once.
pub fn live_param_census(model: &Denoiser) -> Census {
    let adapters = adapter_param_ids(model);
    let mut c = Census::default();
    let mut buffers: Vec<usize> = Vec::new();
    for (id, p) in model.params().iter() {
        if adapters.contains(&id) {
            c.adapter += p.numel();
        } else {
            c.base += p.numel();
            c.base_tensors += 1;
            buffers.push(p.values().as_ptr() as usize);
        }
        if p.is_frozen() {
            c.frozen += p.numel();
        } else {
            c.trainable += p.numel();
        }
    }
    buffers.sort_unstable();
    buffers.dedup();
    c.base_allocations = buffers.len();
    c
}
