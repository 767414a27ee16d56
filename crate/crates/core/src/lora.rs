//! Low-rank adapters on top of frozen base weights.
//!
//! An adapter holds `A (r x in)` and `B (out x r)` and contributes
//! `(alpha / r) * B A` to its layer's weight. `B` starts at zero, so a
//! freshly attached adapter leaves the model's output unchanged.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::denoiser::{AdaptableLinear, Denoiser, DenoiserConfig, LayerSpec};
use crate::numerics::kernels::matmul;
use crate::numerics::{ParamId, ParamStore, Parameter, Tensor};
use crate::{Error, Result};

/// Standard deviation of the Gaussian used for `A` at creation.
pub const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub(crate) a: ParamId,
    pub(crate) b: ParamId,
    pub(crate) rank: usize,
    pub(crate) alpha: f64,
}

impl LoraAdapter {
    pub fn a(&self) -> ParamId {
        self.a
    }

    pub fn b(&self) -> ParamId {
        self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Selects which layers receive adapters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LayerFilter {
    /// Every layer whose smaller side is at least the rank. With a 2-D data
    /// space this skips the input and output projections.
    #[default]
    AdmitsRank,
    All,
    None,
    Named(Vec<alloc::string::String>),
}

impl LayerFilter {
    pub fn matches(&self, layer: &LayerSpec, rank: usize) -> bool {
        match self {
            LayerFilter::AdmitsRank => rank <= layer.in_dim.min(layer.out_dim),
            LayerFilter::All => true,
            LayerFilter::None => false,
            LayerFilter::Named(names) => names.contains(&layer.name),
        }
    }
}

pub fn adapter_names(layer: &str) -> (alloc::string::String, alloc::string::String) {
    (format!("{layer}.lora.A"), format!("{layer}.lora.B"))
}

/// Attaches a fresh adapter to every layer selected by `filter` and freezes
/// that layer's weight and bias. Returns the number of adapted layers.
///
/// Validation runs over all selected layers before anything is mutated.
pub fn attach_adapters(
    model: &mut Denoiser,
    rank: usize,
    alpha: f64,
    filter: &LayerFilter,
    seed: u64,
) -> Result<usize> {
    if rank == 0 {
        return Err(Error::InvalidConfig(
            "adapter rank must be at least 1".into(),
        ));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "adapter alpha must be positive, got {alpha}"
        )));
    }
    let selected: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| filter.matches(&l.spec(), rank))
        .map(|(i, _)| i)
        .collect();
    for &i in &selected {
        let l = &model.layers[i];
        if l.adapter.is_some() {
            return Err(Error::AlreadyAdapted(l.name.clone()));
        }
        let limit = l.in_dim.min(l.out_dim);
        if rank > limit {
            return Err(Error::RankTooLarge {
                layer: l.name.clone(),
                rank,
                limit,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, A_INIT_STD).expect("finite std");
    for &i in &selected {
        let (name, in_dim, out_dim, w0, bias) = {
            let l = &model.layers[i];
            (l.name.clone(), l.in_dim, l.out_dim, l.w0, l.bias)
        };
        let (a_name, b_name) = adapter_names(&name);
        let a_vals: Vec<f64> = (0..rank * in_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let a = model
            .params
            .insert(a_name, Tensor::new(alloc::vec![rank, in_dim], a_vals)?)?;
        let b = model
            .params
            .insert(b_name, Tensor::zeros(alloc::vec![out_dim, rank])?)?;
        model.params.set_frozen(w0, true);
        model.params.set_frozen(bias, true);
        model.layers[i].adapter = Some(LoraAdapter { a, b, rank, alpha });
    }
    Ok(selected.len())
}

/// Freezes every parameter that is not part of an adapter.
pub fn freeze_base(model: &mut Denoiser) {
    let adapter_ids: Vec<ParamId> = adapter_param_ids(model);
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        model.params.set_frozen(id, !adapter_ids.contains(&id));
    }
}

pub fn adapter_param_ids(model: &Denoiser) -> Vec<ParamId> {
    model
        .layers
        .iter()
        .filter_map(|l| l.adapter.as_ref())
        .flat_map(|ad| [ad.a, ad.b])
        .collect()
}

/// `W0`, or `W0 + (alpha / r) B A` when the layer carries an adapter.
pub fn effective_weight(layer: &AdaptableLinear, store: &ParamStore) -> Vec<f64> {
    let w0 = store.values(layer.w0);
    match &layer.adapter {
        None => w0.to_vec(),
        Some(ad) => {
            let ba = matmul(
                store.values(ad.b),
                store.values(ad.a),
                layer.out_dim,
                ad.rank,
                layer.in_dim,
            );
            let s = ad.scale();
            w0.iter().zip(&ba).map(|(w, d)| w + d * s).collect()
        }
    }
}

/// Sum of `r * (in + out)` over the layers `filter` selects.
pub fn count_adapter_params(config: &DenoiserConfig, rank: usize, filter: &LayerFilter) -> usize {
    config
        .layer_specs()
        .iter()
        .filter(|l| filter.matches(l, rank))
        .map(|l| layer_adapter_params(l.in_dim, l.out_dim, rank))
        .sum()
}

pub fn layer_adapter_params(in_dim: usize, out_dim: usize, rank: usize) -> usize {
    rank * (in_dim + out_dim)
}

/// Every parameter that is not frozen, in store order.
pub fn trainable_parameters(model: &Denoiser) -> Vec<&Parameter> {
    model.params.trainable().map(|(_, p)| p).collect()
}
