//! Conditional noise-prediction network `eps(x_t, t, y)`.
//!
//! A residual MLP: the noisy input, a sinusoidal time embedding and a learned
//! class embedding are each projected to the hidden width and summed, then
//! passed through `num_blocks` residual blocks
//! `h + linear2(silu(linear1(silu(h))))` and a final projection back to the
//! data dimension. Every projection is an [`AdaptableLinear`] so low-rank
//! adapters can be attached to it.
//!
//! Row 0 of the class-embedding table is the null condition; class `k` uses
//! row `k`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::SQRT_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::lora::LoraAdapter;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Angles are computed on normalized time rescaled to this range, the
/// conventional span of a discrete diffusion clock.
const TIME_SCALE: f64 = 1000.0;
/// Extra down-scaling of the output projection so an untrained model
/// predicts close to zero.
const OUTPUT_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden_width: usize,
    pub num_blocks: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub num_classes: usize,
    /// Length of the diffusion clock; step indices run over `1..=timesteps`.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_width: 128,
            num_blocks: 3,
            time_embed_dim: 32,
            cond_embed_dim: 16,
            num_classes: 4,
            timesteps: 200,
        }
    }
}

/// Name and dimensions of one linear layer implied by a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("data_dim", self.data_dim),
            ("hidden_width", self.hidden_width),
            ("num_blocks", self.num_blocks),
            ("time_embed_dim", self.time_embed_dim),
            ("cond_embed_dim", self.cond_embed_dim),
            ("num_classes", self.num_classes),
            ("timesteps", self.timesteps),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "time_embed_dim must be even, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// Linear layers in evaluation order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let spec = |name: String, in_dim, out_dim| LayerSpec {
            name,
            in_dim,
            out_dim,
        };
        let h = self.hidden_width;
        let mut out = vec![
            spec("input".into(), self.data_dim, h),
            spec("time_proj".into(), self.time_embed_dim, h),
            spec("cond_proj".into(), self.cond_embed_dim, h),
        ];
        for b in 0..self.num_blocks {
            out.push(spec(format!("block{b}.linear1"), h, h));
            out.push(spec(format!("block{b}.linear2"), h, h));
        }
        out.push(spec("output".into(), h, self.data_dim));
        out
    }

    /// Closed-form count of base parameters: every weight and bias plus the
    /// class-embedding table (K classes plus the null row).
    pub fn base_param_count(&self) -> usize {
        let linear: usize = self
            .layer_specs()
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum();
        linear + (self.num_classes + 1) * self.cond_embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptableLinear {
    pub(crate) name: String,
    pub(crate) w0: ParamId,
    pub(crate) bias: ParamId,
    pub(crate) in_dim: usize,
    pub(crate) out_dim: usize,
    pub(crate) adapter: Option<LoraAdapter>,
}

impl AdaptableLinear {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn w0(&self) -> ParamId {
        self.w0
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        self.adapter.as_ref()
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            name: self.name.clone(),
            in_dim: self.in_dim,
            out_dim: self.out_dim,
        }
    }
}

/// Whether adapter updates take part in a forward pass. `Bypass` evaluates
/// with the base weights alone, which is how the teacher runs on a model
/// that also hosts the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    Active,
    Bypass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    pub(crate) params: ParamStore,
    cond_table: ParamId,
    pub(crate) layers: Vec<AdaptableLinear>,
}

impl Denoiser {
    /// Fresh network with fan-in scaled Gaussian weights and zero biases.
    pub fn build(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let specs = config.layer_specs();
        let last = specs.len() - 1;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let mut std = SQRT_2 / libm::sqrt(spec.in_dim as f64);
            if i == last {
                std *= OUTPUT_INIT_GAIN;
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            let w: Vec<f64> = (0..spec.in_dim * spec.out_dim)
                .map(|_| normal.sample(&mut rng))
                .collect();
            let w0 = params.insert(
                format!("{}.W0", spec.name),
                Tensor::new(vec![spec.out_dim, spec.in_dim], w)?,
            )?;
            let bias = params.insert(
                format!("{}.bias", spec.name),
                Tensor::zeros(vec![spec.out_dim])?,
            )?;
            layers.push(AdaptableLinear {
                name: spec.name,
                w0,
                bias,
                in_dim: spec.in_dim,
                out_dim: spec.out_dim,
                adapter: None,
            });
        }
        let rows = config.num_classes + 1;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let table: Vec<f64> = (0..rows * config.cond_embed_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let cond_table = params.insert(
            "cond_embed.table",
            Tensor::new(vec![rows, config.cond_embed_dim], table)?,
        )?;
        Ok(Self {
            config,
            params,
            cond_table,
            layers,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[AdaptableLinear] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&AdaptableLinear> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn cond_table(&self) -> ParamId {
        self.cond_table
    }

    pub fn has_adapters(&self) -> bool {
        self.layers.iter().any(|l| l.adapter.is_some())
    }

    fn linear<'a>(
        &'a self,
        g: &mut Graph<'a>,
        layer: &AdaptableLinear,
        x: Var,
        mode: AdapterMode,
    ) -> Result<Var> {
        let w0 = g.param(&self.params, layer.w0);
        let w = match (&layer.adapter, mode) {
            (Some(ad), AdapterMode::Active) => {
                let a = g.param(&self.params, ad.a);
                let b = g.param(&self.params, ad.b);
                let ba = g.matmul(b, a)?;
                let scale = g.scalar(ad.scale());
                let delta = g.mul(ba, scale)?;
                g.add(w0, delta)?
            }
            _ => w0,
        };
        let bias = g.param(&self.params, layer.bias);
        let y = g.matmul_t(x, w)?;
        g.add(y, bias)
    }

    /// Records the forward program for a batch on `g` and returns the
    /// predicted noise, shape `(batch, data_dim)`.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x_t: Var,
        t: &[usize],
        y: &[Option<usize>],
        mode: AdapterMode,
    ) -> Result<Var> {
        let cfg = &self.config;
        let batch = t.len();
        let expected = [batch, cfg.data_dim];
        if g.shape(x_t) != expected || y.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "predict_noise",
                lhs: g.shape(x_t).to_vec(),
                rhs: vec![t.len(), y.len()],
            });
        }
        let mut temb = Vec::with_capacity(batch * cfg.time_embed_dim);
        for &step in t {
            temb.extend(time_embedding(step, cfg.timesteps, cfg.time_embed_dim)?);
        }
        let mut rows = Vec::with_capacity(batch);
        for label in y {
            match *label {
                None => rows.push(0),
                Some(k) if (1..=cfg.num_classes).contains(&k) => rows.push(k),
                Some(k) => {
                    return Err(Error::LabelOutOfRange {
                        label: k,
                        classes: cfg.num_classes,
                    })
                }
            }
        }
        let temb = g.constant(vec![batch, cfg.time_embed_dim], temb)?;
        let table = g.param(&self.params, self.cond_table);
        let cemb = g.embedding(table, &rows)?;

        let l = &self.layers;
        let hx = self.linear(g, &l[0], x_t, mode)?;
        let ht = self.linear(g, &l[1], temb, mode)?;
        let hc = self.linear(g, &l[2], cemb, mode)?;
        let h = g.add(hx, ht)?;
        let mut h = g.add(h, hc)?;
        for b in 0..cfg.num_blocks {
            let a = g.silu(h);
            let a = self.linear(g, &l[3 + 2 * b], a, mode)?;
            let a = g.silu(a);
            let a = self.linear(g, &l[4 + 2 * b], a, mode)?;
            h = g.add(h, a)?;
        }
        let h = g.silu(h);
        self.linear(g, &l[l.len() - 1], h, mode)
    }

    /// `eps(x_t, t, y)` with adapters active. `None` labels take the null
    /// condition.
    pub fn predict_noise(&self, x_t: &Tensor, t: &[usize], y: &[Option<usize>]) -> Result<Tensor> {
        self.predict_noise_mode(x_t, t, y, AdapterMode::Active)
    }

    pub fn predict_noise_mode(
        &self,
        x_t: &Tensor,
        t: &[usize],
        y: &[Option<usize>],
        mode: AdapterMode,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input_ref(x_t);
        let out = self.forward(&mut g, x, t, y, mode)?;
        Ok(g.to_tensor(out))
    }
}

/// Sinusoidal embedding of step `t` in `1..=total`: `dim/2` sines followed by
/// `dim/2` cosines, with frequencies geometric from 1 down to 1/10000.
pub fn time_embedding(t: usize, total: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    if t == 0 || t > total {
        return Err(Error::StepOutOfRange {
            step: t,
            steps: total,
        });
    }
    let half = dim / 2;
    let tn = t as f64 / total as f64;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let frac = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = libm::pow(10_000.0, -frac);
        let angle = TIME_SCALE * tn * freq;
        out[i] = libm::sin(angle);
        out[half + i] = libm::cos(angle);
    }
    Ok(out)
}
