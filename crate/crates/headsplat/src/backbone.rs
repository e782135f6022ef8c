//! Multi-granularity feature extraction: a small patch-token transformer with
//! taps at configured layers. Each tap is reshaped to a 2D map and convolved;
//! the tap maps are channel-concatenated and fused by a final convolution into
//! the fixed-width feature map that everything downstream consumes. The pooled
//! final-layer token is the global feature.
//!
//! Only this module scales with `BackboneConfig::width`; the fused map width
//! is fixed so the drive path never sees the backbone's size.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::img::Image;
use crate::tape::{Tape, Var};
use crate::weights::{self, tape_param, WeightStore};

// Shared transformer building blocks, reused by the canonicalizer.

/// x @ W + b for TxI tokens.
pub(crate) fn linear(tape: &mut Tape, store: &WeightStore, x: Var, prefix: &str) -> Var {
    let w = tape_param(tape, store, &format!("{prefix}.w"));
    let b = tape_param(tape, store, &format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add_bias_rows(y, b)
}

pub(crate) fn layernorm(tape: &mut Tape, store: &WeightStore, x: Var, prefix: &str) -> Var {
    let g = tape_param(tape, store, &format!("{prefix}.g"));
    let b = tape_param(tape, store, &format!("{prefix}.b"));
    tape.layernorm_rows(x, g, b)
}

/// Multi-head attention with queries from `xq` and keys/values from `xkv`.
pub(crate) fn attention(
    tape: &mut Tape,
    store: &WeightStore,
    xq: Var,
    xkv: Var,
    prefix: &str,
    heads: usize,
) -> Var {
    let q = linear(tape, store, xq, &format!("{prefix}.q"));
    let k = linear(tape, store, xkv, &format!("{prefix}.k"));
    let v = linear(tape, store, xkv, &format!("{prefix}.v"));
    let d = tape.val(q).shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_axis(q, 1, h * dh, dh);
        let kh = tape.slice_axis(k, 1, h * dh, dh);
        let vh = tape.slice_axis(v, 1, h * dh, dh);
        let kt = tape.transpose2(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.mul_scalar(scores, scale);
        let attn = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat(1, &head_outs);
    linear(tape, store, merged, &format!("{prefix}.o"))
}

/// Two-layer GELU MLP.
pub(crate) fn mlp(tape: &mut Tape, store: &WeightStore, x: Var, prefix: &str) -> Var {
    let h = linear(tape, store, x, &format!("{prefix}.1"));
    let h = tape.gelu(h);
    linear(tape, store, h, &format!("{prefix}.2"))
}

/// Pre-norm transformer block: x += attn(ln(x)); x += mlp(ln(x)).
fn vit_block(tape: &mut Tape, store: &WeightStore, x: Var, prefix: &str, heads: usize) -> Var {
    let n1 = layernorm(tape, store, x, &format!("{prefix}.ln1"));
    let a = attention(tape, store, n1, n1, &format!("{prefix}.attn"), heads);
    let x = tape.add(x, a);
    let n2 = layernorm(tape, store, x, &format!("{prefix}.ln2"));
    let m = mlp(tape, store, n2, &format!("{prefix}.mlp"));
    tape.add(x, m)
}

/// Splits an image into non-overlapping patch tokens (T x patch*patch*3).
pub fn patchify_image(img: &Image, patch: usize) -> Array2<f64> {
    let g = img.height() / patch;
    let gw = img.width() / patch;
    let mut tokens = Array2::zeros((g * gw, patch * patch * 3));
    for ti in 0..g {
        for tj in 0..gw {
            let t = ti * gw + tj;
            for pi in 0..patch {
                for pj in 0..patch {
                    for c in 0..3 {
                        tokens[[t, (pi * patch + pj) * 3 + c]] =
                            img.data[[ti * patch + pi, tj * patch + pj, c]];
                    }
                }
            }
        }
    }
    tokens
}

/// Runs the backbone. Returns (fused feature map `fused_channels x g x g`,
/// global feature `width`).
pub fn extract_features(
    tape: &mut Tape,
    store: &WeightStore,
    cfg: &ModelConfig,
    img: &Image,
) -> crate::Result<(Var, Var)> {
    let bb = &cfg.backbone;
    if img.height() != cfg.resolution || img.width() != cfg.resolution {
        return Err(crate::Error::shape(format!(
            "backbone expects {0}x{0} input, got {1}x{2}",
            cfg.resolution,
            img.height(),
            img.width()
        )));
    }
    let g = cfg.feat_grid();
    let tokens = tape.constant2(patchify_image(img, bb.patch));
    let x = linear(tape, store, tokens, "backbone.patch_embed");
    let pos = tape_param(tape, store, "backbone.pos_embed");
    let mut x = tape.add(x, pos);

    let mut taps = Vec::new();
    for layer in 0..bb.depth {
        x = vit_block(tape, store, x, &format!("backbone.block{layer}"), bb.heads);
        if bb.tap_layers.contains(&layer) {
            taps.push(x);
        }
    }

    // Tap maps: tokens (g*g x width) -> width x g x g, conv, concat, fuse.
    let mut tap_maps = Vec::with_capacity(taps.len());
    for (ti, tap) in taps.iter().enumerate() {
        let m = tape.transpose2(*tap);
        let m = tape.reshape(m, &[bb.width, g, g]);
        let w = tape_param(tape, store, &format!("backbone.tap{ti}.w"));
        let b = tape_param(tape, store, &format!("backbone.tap{ti}.b"));
        let conv = tape.conv2d(m, w, b, 3, 1, 1);
        tap_maps.push(tape.gelu(conv));
    }
    let stacked = tape.concat(0, &tap_maps);
    let fw = tape_param(tape, store, "backbone.fuse.w");
    let fb = tape_param(tape, store, "backbone.fuse.b");
    let fused = tape.conv2d(stacked, fw, fb, 3, 1, 1);

    let xf = layernorm(tape, store, x, "backbone.ln_f");
    let global = tape.mean_rows(xf);
    Ok((fused, global))
}

/// Registers all backbone weights.
pub fn init_backbone(store: &mut WeightStore, cfg: &ModelConfig, seed: u64) {
    let bb = &cfg.backbone;
    let g = cfg.feat_grid();
    let tokens = g * g;
    let pdim = bb.patch * bb.patch * 3;
    weights::init_linear(store, seed, "backbone.patch_embed.w", pdim, bb.width);
    weights::init_zeros1(store, "backbone.patch_embed.b", bb.width);
    weights::init_matrix(store, seed, "backbone.pos_embed", tokens, bb.width, 0.02);
    for layer in 0..bb.depth {
        let p = format!("backbone.block{layer}");
        weights::init_ones1(store, &format!("{p}.ln1.g"), bb.width);
        weights::init_zeros1(store, &format!("{p}.ln1.b"), bb.width);
        for nm in ["q", "k", "v", "o"] {
            weights::init_linear(store, seed, &format!("{p}.attn.{nm}.w"), bb.width, bb.width);
            weights::init_zeros1(store, &format!("{p}.attn.{nm}.b"), bb.width);
        }
        weights::init_ones1(store, &format!("{p}.ln2.g"), bb.width);
        weights::init_zeros1(store, &format!("{p}.ln2.b"), bb.width);
        let hidden = bb.width * bb.mlp_ratio;
        weights::init_linear(store, seed, &format!("{p}.mlp.1.w"), bb.width, hidden);
        weights::init_zeros1(store, &format!("{p}.mlp.1.b"), hidden);
        weights::init_linear(store, seed, &format!("{p}.mlp.2.w"), hidden, bb.width);
        weights::init_zeros1(store, &format!("{p}.mlp.2.b"), bb.width);
    }
    for ti in 0..bb.tap_layers.len() {
        weights::init_conv(store, seed, &format!("backbone.tap{ti}.w"), bb.tap_channels, bb.width, 3);
        weights::init_zeros1(store, &format!("backbone.tap{ti}.b"), bb.tap_channels);
    }
    let concat_ch = bb.tap_channels * bb.tap_layers.len();
    weights::init_conv(store, seed, "backbone.fuse.w", bb.fused_channels, concat_ch, 3);
    weights::init_zeros1(store, "backbone.fuse.b", bb.fused_channels);
    weights::init_ones1(store, "backbone.ln_f.g", bb.width);
    weights::init_zeros1(store, "backbone.ln_f.b", bb.width);
}
