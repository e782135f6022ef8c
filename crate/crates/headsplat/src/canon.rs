//! Expression canonicalization: the fused feature map is tokenized, passed
//! through L transformer blocks whose cross-attention is conditioned on the
//! source control vector (projected to context tokens by an MLP), and
//! re-assembled. Residual output projections are zero-initialized, so a fresh
//! canonicalizer is exactly the identity map.

use ndarray::Array1;

use crate::backbone::{attention, layernorm, linear, mlp};
use crate::config::ModelConfig;
use crate::tape::{Tape, Var};
use crate::weights::{self, WeightStore};

/// Maps the feature map `C x g x g` to canonical space, conditioned on α_s.
pub fn canonicalize(
    tape: &mut Tape,
    store: &WeightStore,
    cfg: &ModelConfig,
    fmap: Var,
    alpha_s: &[f64],
) -> crate::Result<Var> {
    let c = cfg.backbone.fused_channels;
    let g = cfg.feat_grid();
    let shape = tape.val(fmap).shape().to_vec();
    if shape != [c, g, g] {
        return Err(crate::Error::shape(format!("canonicalize expects [{c}, {g}, {g}], got {shape:?}")));
    }
    if alpha_s.len() != cfg.alpha.total() {
        return Err(crate::Error::shape(format!(
            "alpha has {} entries, config says {}",
            alpha_s.len(),
            cfg.alpha.total()
        )));
    }

    // Control vector -> context tokens for cross-attention.
    let a = tape.constant2(ndarray::Array2::from_shape_vec((1, alpha_s.len()), alpha_s.to_vec()).unwrap());
    let h = linear(tape, store, a, "canon.alpha.1");
    let h = tape.gelu(h);
    let h = linear(tape, store, h, "canon.alpha.2");
    let ctx = tape.reshape(h, &[cfg.canon_ctx_tokens, c]);

    // Feature cells as tokens: C x g x g -> (g*g) x C.
    let flat = tape.reshape(fmap, &[c, g * g]);
    let mut x = tape.transpose2(flat);

    for l in 0..cfg.canon_blocks {
        let p = format!("canon.block{l}");
        let n1 = layernorm(tape, store, x, &format!("{p}.ln1"));
        let sa = attention(tape, store, n1, n1, &format!("{p}.self"), cfg.canon_heads);
        x = tape.add(x, sa);
        let n2 = layernorm(tape, store, x, &format!("{p}.ln2"));
        let ca = attention(tape, store, n2, ctx, &format!("{p}.cross"), cfg.canon_heads);
        x = tape.add(x, ca);
        let n3 = layernorm(tape, store, x, &format!("{p}.ln3"));
        let m = mlp(tape, store, n3, &format!("{p}.mlp"));
        x = tape.add(x, m);
    }

    // Tokens back to the map layout.
    let xt = tape.transpose2(x);
    Ok(tape.reshape(xt, &[c, g, g]))
}

/// Registers the canonicalizer weights. Residual-branch output projections
/// (attention `o` and MLP second layer) start at zero: identity at init.
pub fn init_canon(store: &mut WeightStore, cfg: &ModelConfig, seed: u64) {
    let c = cfg.backbone.fused_channels;
    let a_total = cfg.alpha.total();
    let ctx = cfg.canon_ctx_tokens;
    weights::init_linear(store, seed, "canon.alpha.1.w", a_total, c);
    weights::init_zeros1(store, "canon.alpha.1.b", c);
    weights::init_linear(store, seed, "canon.alpha.2.w", c, ctx * c);
    weights::init_zeros1(store, "canon.alpha.2.b", ctx * c);
    for l in 0..cfg.canon_blocks {
        let p = format!("canon.block{l}");
        for ln in ["ln1", "ln2", "ln3"] {
            weights::init_ones1(store, &format!("{p}.{ln}.g"), c);
            weights::init_zeros1(store, &format!("{p}.{ln}.b"), c);
        }
        for branch in ["self", "cross"] {
            for nm in ["q", "k", "v"] {
                weights::init_linear(store, seed, &format!("{p}.{branch}.{nm}.w"), c, c);
                weights::init_zeros1(store, &format!("{p}.{branch}.{nm}.b"), c);
            }
            weights::init_zeros2(store, &format!("{p}.{branch}.o.w"), c, c);
            weights::init_zeros1(store, &format!("{p}.{branch}.o.b"), c);
        }
        let hidden = c * 2;
        weights::init_linear(store, seed, &format!("{p}.mlp.1.w"), c, hidden);
        weights::init_zeros1(store, &format!("{p}.mlp.1.b"), hidden);
        weights::init_zeros2(store, &format!("{p}.mlp.2.w"), hidden, c);
        weights::init_zeros1(store, &format!("{p}.mlp.2.b"), c);
    }
}

/// Flattens a control vector for conditioning input.
pub fn alpha_vec(alpha: &Array1<f64>) -> Vec<f64> {
    alpha.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneConfig, ModelConfig};
    use crate::rng::substream;
    use ndarray::Array3;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                width: 32,
                depth: 2,
                heads: 4,
                tap_layers: vec![1],
                tap_channels: 8,
                fused_channels: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn random_fmap(seed: u64, c: usize, g: usize) -> Array3<f64> {
        let mut rng = substream(seed, "canon-test");
        Array3::from_shape_fn((c, g, g), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn identity_at_init_is_exact() {
        let cfg = cfg();
        let mut store = WeightStore::new();
        init_canon(&mut store, &cfg, 5);
        let fmap = random_fmap(1, 16, 8);
        let alpha = vec![0.3; cfg.alpha.total()];
        let mut tape = Tape::inference();
        let v = tape.constant3(fmap.clone());
        let out = canonicalize(&mut tape, &store, &cfg, v, &alpha).unwrap();
        assert_eq!(tape.val3(out), fmap, "zero-init residual projections must be the identity");
    }

    #[test]
    fn shape_is_preserved_and_alpha_matters_after_perturbation() {
        let cfg = cfg();
        let mut store = WeightStore::new();
        init_canon(&mut store, &cfg, 5);
        // Break identity: give the cross-attention output projection weight.
        weights::init_linear(&mut store, 99, "canon.block0.cross.o.w", 16, 16);
        let fmap = random_fmap(2, 16, 8);
        let mut tape = Tape::inference();
        let v = tape.constant3(fmap);
        let a1 = vec![0.5; cfg.alpha.total()];
        let mut a2 = a1.clone();
        a2[0] = -0.5;
        let o1 = canonicalize(&mut tape, &store, &cfg, v, &a1).unwrap();
        let o2 = canonicalize(&mut tape, &store, &cfg, v, &a2).unwrap();
        assert_eq!(tape.val(o1).shape(), &[16, 8, 8]);
        let d: f64 = tape.val(o1).iter().zip(tape.val(o2).iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(d > 1e-9, "distinct alphas should steer the output once weights are nonzero");
    }

    #[test]
    fn alpha_dimension_mismatch_is_an_error() {
        let cfg = cfg();
        let mut store = WeightStore::new();
        init_canon(&mut store, &cfg, 5);
        let mut tape = Tape::inference();
        let v = tape.constant3(random_fmap(3, 16, 8));
        assert!(canonicalize(&mut tape, &store, &cfg, v, &[0.0; 5]).is_err());
    }
}
