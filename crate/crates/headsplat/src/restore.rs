//! Texture restoration: three stacked spatial-feature-transform modulations
//! over a small conv trunk, conditioned on the canonical feature map cached in
//! the avatar. The module predicts a residual over the raw splat render and is
//! exactly the identity at init (zero decoder), so stage-1 training starts
//! from the unrefined image.
//!
//! The (γ, β) modulation maps depend only on the avatar, so the drive loop
//! computes them once per avatar, never per frame.

use ndarray::Array3;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::weights::{self, tape_param, WeightStore};

/// Per-block modulation maps at render resolution.
pub struct GammaBeta {
    pub maps: Vec<(Var, Var)>,
}

/// Lifts conditioning features to per-block (γ, β) maps: one conv per block at
/// feature resolution, then nearest upsampling to render resolution.
pub fn compute_gamma_beta(
    tape: &mut Tape,
    store: &WeightStore,
    cfg: &ModelConfig,
    cond: Var,
) -> Result<GammaBeta> {
    let g = cfg.feat_grid();
    let shape = tape.val(cond).shape().to_vec();
    if shape != [cfg.backbone.fused_channels, g, g] {
        return Err(Error::shape(format!("restorer conditioning shape {shape:?}")));
    }
    let c = cfg.restore_channels;
    let ups = (cfg.resolution / g).trailing_zeros();
    let mut maps = Vec::with_capacity(cfg.restore_blocks);
    for b in 0..cfg.restore_blocks {
        let w = tape_param(tape, store, &format!("restore.block{b}.cond.w"));
        let bias = tape_param(tape, store, &format!("restore.block{b}.cond.b"));
        let mut gb = tape.conv2d(cond, w, bias, 3, 1, 1); // 2C x g x g
        for _ in 0..ups {
            gb = tape.upsample2(gb);
        }
        let gamma = tape.slice_axis(gb, 0, 0, c);
        let beta = tape.slice_axis(gb, 0, c, c);
        maps.push((gamma, beta));
    }
    Ok(GammaBeta { maps })
}

/// Runs the trunk with precomputed modulation maps:
/// `f <- conv(f) * (1 + γ) + β` per block, then a zero-init decoder adds a
/// residual to the raw render, clipped to [0,1].
pub fn refine_with(
    tape: &mut Tape,
    store: &WeightStore,
    cfg: &ModelConfig,
    raw: Var,
    gamma_beta: &GammaBeta,
) -> Result<Var> {
    let shape = tape.val(raw).shape().to_vec();
    if shape != [cfg.resolution, cfg.resolution, 3] {
        return Err(Error::shape(format!("refine expects HxWx3 render, got {shape:?}")));
    }
    if gamma_beta.maps.len() != cfg.restore_blocks {
        return Err(Error::shape("gamma/beta block count mismatch"));
    }
    let x = tape.hwc_to_chw(raw);
    let we = tape_param(tape, store, "restore.enc.w");
    let be = tape_param(tape, store, "restore.enc.b");
    let mut f = tape.conv2d(x, we, be, 3, 1, 1);
    f = tape.gelu(f);
    for (b, (gamma, beta)) in gamma_beta.maps.iter().enumerate() {
        let w = tape_param(tape, store, &format!("restore.block{b}.conv.w"));
        let bias = tape_param(tape, store, &format!("restore.block{b}.conv.b"));
        let cf = tape.conv2d(f, w, bias, 3, 1, 1);
        let gp1 = tape.add_scalar(*gamma, 1.0);
        let modulated = tape.mul(cf, gp1);
        f = tape.add(modulated, *beta);
    }
    let wd = tape_param(tape, store, "restore.dec.w");
    let bd = tape_param(tape, store, "restore.dec.b");
    let res = tape.conv2d(f, wd, bd, 3, 1, 1);
    let res_img = tape.chw_to_hwc(res);
    let sum = tape.add(raw, res_img);
    Ok(tape.clamp01(sum))
}

/// One-call form: compute modulation from `cond`, then refine.
pub fn refine(
    tape: &mut Tape,
    store: &WeightStore,
    cfg: &ModelConfig,
    raw: Var,
    cond: Var,
) -> Result<Var> {
    let gb = compute_gamma_beta(tape, store, cfg, cond)?;
    refine_with(tape, store, cfg, raw, &gb)
}

pub fn init_restore(store: &mut WeightStore, cfg: &ModelConfig, seed: u64) {
    let c = cfg.restore_channels;
    weights::init_conv(store, seed, "restore.enc.w", c, 3, 3);
    weights::init_zeros1(store, "restore.enc.b", c);
    for b in 0..cfg.restore_blocks {
        weights::init_conv(store, seed, &format!("restore.block{b}.cond.w"), 2 * c, cfg.backbone.fused_channels, 3);
        weights::init_zeros1(store, &format!("restore.block{b}.cond.b"), 2 * c);
        weights::init_conv(store, seed, &format!("restore.block{b}.conv.w"), c, c, 3);
        weights::init_zeros1(store, &format!("restore.block{b}.conv.b"), c);
    }
    // Identity at init: the decoder contributes nothing until trained.
    weights::init_zeros2(store, "restore.dec.w", 3, c * 9);
    weights::init_zeros1(store, "restore.dec.b", 3);
}

/// Evaluates the restorer outside any training graph.
pub fn refine_image(
    store: &WeightStore,
    cfg: &ModelConfig,
    raw: &crate::img::Image,
    cond: &Array3<f64>,
) -> Result<crate::img::Image> {
    let mut tape = Tape::inference();
    let raw_v = tape.constant3(raw.data.clone());
    let cond_v = tape.constant3(cond.clone());
    let out = refine(&mut tape, store, cfg, raw_v, cond_v)?;
    crate::img::Image::new(tape.val3(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::Image;
    use crate::rng::substream;
    use ndarray::Array3;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            backbone: crate::config::BackboneConfig {
                width: 32,
                depth: 2,
                heads: 4,
                tap_layers: vec![1],
                tap_channels: 8,
                fused_channels: 16,
                ..Default::default()
            },
            restore_channels: 6,
            ..Default::default()
        }
    }

    fn random_inputs(seed: u64, cfg: &ModelConfig) -> (Image, Array3<f64>) {
        let mut rng = substream(seed, "restore-test");
        let raw = Image::new(Array3::from_shape_fn(
            (cfg.resolution, cfg.resolution, 3),
            |_| rng.gen::<f64>(),
        ))
        .unwrap();
        let g = cfg.feat_grid();
        let cond = Array3::from_shape_fn((cfg.backbone.fused_channels, g, g), |_| {
            rng.gen::<f64>() * 2.0 - 1.0
        });
        (raw, cond)
    }

    #[test]
    fn identity_at_init_is_exact() {
        let cfg = cfg();
        let mut store = WeightStore::new();
        init_restore(&mut store, &cfg, 9);
        let (raw, cond) = random_inputs(1, &cfg);
        let out = refine_image(&store, &cfg, &raw, &cond).unwrap();
        assert_eq!(out.data, raw.data, "zero-init decoder must return clip(raw) exactly");
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = cfg();
        let mut store = WeightStore::new();
        init_restore(&mut store, &cfg, 9);
        // Give the decoder weight so the residual is nonzero.
        weights::init_conv(&mut store, 33, "restore.dec.w", 3, cfg.restore_channels, 3);
        let (raw, cond) = random_inputs(2, &cfg);
        let out = refine_image(&store, &cfg, &raw, &cond).unwrap();
        assert_eq!(out.data.shape(), raw.data.shape());
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let delta: f64 = out.data.iter().zip(raw.data.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta > 1e-9, "non-zero decoder should modify the render");
    }

    #[test]
    fn exactly_three_sft_blocks_at_default_config() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.restore_blocks, 3);
        let mut store = WeightStore::new();
        init_restore(&mut store, &cfg, 9);
        assert!(store.contains("restore.block2.cond.w"));
        assert!(!store.contains("restore.block3.cond.w"));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = cfg();
        let mut store = WeightStore::new();
        init_restore(&mut store, &cfg, 9);
        let mut tape = Tape::inference();
        let bad = tape.constant3(Array3::zeros((8, 8, 3)));
        let g = cfg.feat_grid();
        let cond = tape.constant3(Array3::zeros((cfg.backbone.fused_channels, g, g)));
        assert!(refine(&mut tape, &store, &cfg, bad, cond).is_err());
    }
}
