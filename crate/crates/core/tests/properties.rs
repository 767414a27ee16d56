use guided_lora_core::datagen::default_gmm;
use guided_lora_core::denoiser::{Denoiser, DenoiserConfig};
use guided_lora_core::diffusion::{guidance_combine, GuidanceSpec, NoiseSchedule};
use guided_lora_core::distill::{distill_probe, DistillBatch};
use guided_lora_core::eval::{agreement_mse, energy_distance};
use guided_lora_core::lora::{attach_adapters, LayerFilter};
use guided_lora_core::memacct::{footprint, FootprintModel, ParamCounts};
use guided_lora_core::numerics::Tensor;
use proptest::prelude::*;

/// Multiples of 2^-10 in [-8, 8]: sums, differences and small products
/// stay exactly representable.
fn dyadic() -> impl Strategy<Value = f64> {
    (-8192i32..=8192).prop_map(|k| k as f64 / 1024.0)
}

fn dyadic_scale() -> impl Strategy<Value = f64> {
    (0u32..=128).prop_map(|k| k as f64 / 16.0)
}

fn finite() -> impl Strategy<Value = f64> {
    -1e3f64..1e3
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn guidance_zero_and_one(u in prop::collection::vec(finite(), 1..8), c_seed in finite()) {
        let c: Vec<f64> = u.iter().map(|x| x * 0.5 + c_seed).collect();
        let g0 = guidance_combine(&u, &c, GuidanceSpec::new(0.0).unwrap()).unwrap();
        let g1 = guidance_combine(&u, &c, GuidanceSpec::new(1.0).unwrap()).unwrap();
        prop_assert_eq!(g0, u.clone());
        prop_assert_eq!(g1, c);
        let same = guidance_combine(&u, &u, GuidanceSpec::new(3.7).unwrap()).unwrap();
        prop_assert_eq!(same, u);
    }

    #[test]
    fn guidance_affinity_exact(u in dyadic(), c in dyadic(), s in dyadic_scale()) {
        let out = guidance_combine(&[u], &[c], GuidanceSpec::new(s).unwrap()).unwrap()[0];
        prop_assert_eq!(out - u, s * (c - u));
    }

    #[test]
    fn guidance_affinity_general(u in finite(), c in finite(), s in 0.0f64..10.0) {
        let out = guidance_combine(&[u], &[c], GuidanceSpec::new(s).unwrap()).unwrap()[0];
        let scale = u.abs().max(s * (c - u).abs()).max(1.0);
        prop_assert!(((out - u) - s * (c - u)).abs() <= 4.0 * f64::EPSILON * scale);
    }

    #[test]
    fn energy_distance_symmetric_and_nonnegative(
        a in prop::collection::vec(-5.0f64..5.0, 2..40),
        b in prop::collection::vec(-5.0f64..5.0, 2..40),
    ) {
        let a = &a[..a.len() / 2 * 2];
        let b = &b[..b.len() / 2 * 2];
        let ab = energy_distance(a, b, 2).unwrap();
        let ba = energy_distance(b, a, 2).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= -1e-12);
        prop_assert!(energy_distance(a, a, 2).unwrap().abs() <= 1e-12);
    }

    /// With bytes ∝ stored + (g + o)·trainable, naive distillation always
    /// costs more than plain training, and LoRA distillation costs less
    /// whenever L < P (g + o) / (1 + g + o).
    #[test]
    fn footprint_direction(p in 1usize..1_000_000, frac in 0.0f64..1.0, g in 0.0f64..4.0, o in 0.0f64..4.0, bpp in 0.5f64..8.0) {
        prop_assume!(g + o > 0.0);
        let m = FootprintModel { bytes_per_param: bpp, optimizer_state_multiplier: o, gradient_multiplier: g, include_inference_only: false };
        let bound = p as f64 * (g + o) / (1.0 + g + o);
        let l = (frac * bound) as usize;
        let base = footprint(&ParamCounts { base: p, adapters: 0, duplicated: 0, trainable: p }, &m);
        let naive = footprint(&ParamCounts { base: p, adapters: 0, duplicated: p, trainable: p }, &m);
        let lora = footprint(&ParamCounts { base: p, adapters: l, duplicated: 0, trainable: l }, &m);
        prop_assert!(naive > base);
        prop_assert!(lora < base);
    }
}

fn permuted(batch: &DistillBatch, perm: &[usize]) -> DistillBatch {
    let rows: Vec<&[f64]> = perm.iter().map(|&i| batch.x_t.row(i)).collect();
    DistillBatch {
        x_t: Tensor::from_rows(&rows).unwrap(),
        t: perm.iter().map(|&i| batch.t[i]).collect(),
        y: perm.iter().map(|&i| batch.y[i]).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Permuting the probe reorders a sum of per-row terms; equality holds
    /// up to summation rounding.
    #[test]
    fn agreement_mse_permutation_invariant(seed in 0u64..1000, perm in Just((0..64).collect::<Vec<usize>>()).prop_shuffle()) {
        let cfg = DenoiserConfig { hidden_width: 16, num_blocks: 1, time_embed_dim: 8, cond_embed_dim: 4, ..DenoiserConfig::default() };
        let mut model = Denoiser::build(cfg, seed).unwrap();
        attach_adapters(&mut model, 4, 4.0, &LayerFilter::AdmitsRank, seed).unwrap();
        let b = model.params().id("block0.linear1.lora.B").unwrap();
        model.params_mut().set_values(b, &[0.1; 64]).unwrap();
        let probe = distill_probe(&default_gmm(), &NoiseSchedule::default(), 64, seed).unwrap();
        let g = GuidanceSpec::new(3.0).unwrap();
        let a = agreement_mse(&model, &probe, g).unwrap();
        let p = agreement_mse(&model, &permuted(&probe, &perm), g).unwrap();
        prop_assert!((a - p).abs() <= 1e-12 * a.abs().max(1e-300));
    }
}
