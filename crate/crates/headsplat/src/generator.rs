//! The Gaussian generator: a static block that predicts identity appearance
//! anchored to the canonical mesh vertices, and a dynamic block that predicts
//! the appearance of the motion-bearing gaussians from the canonical feature
//! map. Dynamic positions come from the drive network, never from here.

use ndarray::{Array1, Array2, Array3};
use std::io::{Read, Write};

use crate::backbone::linear;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gauss::{self, concat_gaussians, snap_f32, GaussianSet};
use crate::mesh::CanonicalMesh;
use crate::tape::{Tape, Var};
use crate::weights::{self, tape_param, WeightStore};

/// Raw (pre-activation) appearance of the dynamic gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicAppearance {
    pub colors: Array2<f64>,
    pub opacities: Array1<f64>,
    pub scales: Array2<f64>,
    pub rotations: Array2<f64>,
}

/// Provenance of a one-shot reconstruction: the resolved model config and the
/// hash of the checkpoint that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub config_json: String,
    pub checkpoint_hash: [u8; 32],
}

/// The frozen product of one-shot reconstruction. Everything the per-frame
/// drive loop needs, nothing it does not: static gaussians, raw dynamic
/// appearance, and restorer conditioning features. Values are snapped through
/// f32 on construction so the on-disk container round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AvatarState {
    pub static_set: GaussianSet,
    pub dyn_appearance: DynamicAppearance,
    pub restore_features: Array3<f64>,
    pub provenance: Provenance,
}

/// Tape handles for the activated static attributes.
pub struct StaticVars {
    pub positions: Var,
    pub colors: Var,
    pub opacities: Var,
    pub scales: Var,
    pub rotations: Var,
}

/// Tape handles for the raw dynamic appearance.
pub struct DynAppearanceVars {
    pub colors: Var,
    pub opacities: Var,
    pub scales: Var,
    pub rotations: Var,
}

/// Per-vertex static block: MLP([global ∥ pooled canonical ∥ vertex embed]).
/// Offsets are tanh-clamped to `offset_clamp * head radius` around the mesh;
/// the offset head is zero-initialized so positions start exactly on the mesh.
pub fn generate_static(
    tape: &mut Tape,
    store: &WeightStore,
    cfg: &ModelConfig,
    mesh: &CanonicalMesh,
    canonical: Var,
    global: Var,
) -> Result<StaticVars> {
    let k = cfg.mesh.vertex_count;
    if mesh.len() != k {
        return Err(Error::shape(format!("mesh has {} vertices, config says {k}", mesh.len())));
    }
    let pooled = tape.spatial_mean(canonical);
    let joined = tape.concat(0, &[global, pooled]);
    let d = tape.val(joined).shape()[0];
    let g_row = tape.reshape(joined, &[1, d]);
    let ones = tape.constant2(Array2::from_elem((k, 1), 1.0));
    let g_rep = tape.matmul(ones, g_row);
    let emb = tape_param(tape, store, "gen.vertex_embed");
    let x = tape.concat(1, &[g_rep, emb]);

    let h = linear(tape, store, x, "gen.static.1");
    let h = tape.gelu(h);
    let h = linear(tape, store, h, "gen.static.2");
    let h = tape.gelu(h);

    let clamp = cfg.offset_clamp * cfg.mesh.geometry.radius();
    let off_raw = linear(tape, store, h, "gen.static.offset");
    let off_t = tape.tanh(off_raw);
    let off = tape.mul_scalar(off_t, clamp);
    let verts = tape.constant2(mesh.vertices.clone());
    let positions = tape.add(verts, off);

    let col_raw = linear(tape, store, h, "gen.static.color");
    let colors = tape.sigmoid(col_raw);
    let opa_raw = linear(tape, store, h, "gen.static.opacity");
    let opa_flat = tape.reshape(opa_raw, &[k]);
    let opacities = tape.sigmoid(opa_flat);
    let scl_raw = linear(tape, store, h, "gen.static.scale");
    let scl_biased = tape.add_scalar(scl_raw, (cfg.static_scale_frac * cfg.mesh.geometry.radius()).ln());
    let scales = tape.exp(scl_biased);
    let rot_raw = linear(tape, store, h, "gen.static.rot");
    let rotations = tape.normalize_rows(rot_raw);

    Ok(StaticVars { positions, colors, opacities, scales, rotations })
}

/// Dynamic appearance block: convolutions over the canonical feature map whose
/// output grid cells map 1:1 to dynamic gaussians. Returns raw attributes.
pub fn generate_dynamic_appearance(
    tape: &mut Tape,
    store: &WeightStore,
    cfg: &ModelConfig,
    canonical: Var,
) -> Result<DynAppearanceVars> {
    let g = cfg.feat_grid();
    let shape = tape.val(canonical).shape().to_vec();
    if shape != [cfg.backbone.fused_channels, g, g] {
        return Err(Error::shape(format!("dynamic block expects the canonical map, got {shape:?}")));
    }
    let w0 = tape_param(tape, store, "gen.dyn.conv0.w");
    let b0 = tape_param(tape, store, "gen.dyn.conv0.b");
    let mut x = tape.conv2d(canonical, w0, b0, 3, 1, 1);
    x = tape.gelu(x);
    let mut size = g;
    let mut stage = 0;
    while size < cfg.dyn_grid {
        x = tape.upsample2(x);
        let w = tape_param(tape, store, &format!("gen.dyn.up{stage}.w"));
        let b = tape_param(tape, store, &format!("gen.dyn.up{stage}.b"));
        x = tape.conv2d(x, w, b, 3, 1, 1);
        x = tape.gelu(x);
        size *= 2;
        stage += 1;
    }
    let wh = tape_param(tape, store, "gen.dyn.head.w");
    let bh = tape_param(tape, store, "gen.dyn.head.b");
    let out = tape.conv2d(x, wh, bh, 1, 1, 0); // 11 x G x G
    let n = cfg.n_dyn();
    let flat = tape.reshape(out, &[11, n]);
    let rows = tape.transpose2(flat); // N x 11

    let colors = tape.slice_axis(rows, 1, 0, 3);
    let opac2 = tape.slice_axis(rows, 1, 3, 1);
    let opacities = tape.reshape(opac2, &[n]);
    let scales = tape.slice_axis(rows, 1, 4, 3);
    let rotations = tape.slice_axis(rows, 1, 7, 4);
    Ok(DynAppearanceVars { colors, opacities, scales, rotations })
}

/// Activates raw dynamic appearance and attaches driven positions.
pub fn activate_dynamic(
    cfg: &ModelConfig,
    dyn_app: &DynamicAppearance,
    positions: &Array2<f64>,
) -> Result<GaussianSet> {
    let n = cfg.n_dyn();
    if positions.nrows() != n || dyn_app.colors.nrows() != n {
        return Err(Error::shape(format!(
            "dynamic position count {} != N_dyn {n}",
            positions.nrows()
        )));
    }
    let bias = (cfg.dyn_scale_frac * cfg.mesh.geometry.radius()).ln();
    GaussianSet::from_raw(
        positions.clone(),
        dyn_app.colors.clone(),
        dyn_app.opacities.clone(),
        dyn_app.scales.mapv(|v| v + bias),
        dyn_app.rotations.clone(),
    )
}

/// Activates the dynamic appearance and concatenates static and dynamic parts
/// into the complete cloud (static entries first). Pure; touches no weights.
pub fn assemble(cfg: &ModelConfig, state: &AvatarState, dyn_positions: &Array2<f64>) -> Result<GaussianSet> {
    let dynamic = activate_dynamic(cfg, &state.dyn_appearance, dyn_positions)?;
    Ok(concat_gaussians(&state.static_set, &dynamic))
}

/// Tape version of the dynamic activation + concatenation for training.
pub struct AssembledVars {
    pub positions: Var,
    pub colors: Var,
    pub opacities: Var,
    pub scales: Var,
    pub rotations: Var,
}

pub fn assemble_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    stat: &StaticVars,
    dyn_app: &DynAppearanceVars,
    dyn_positions: Var,
) -> AssembledVars {
    let dyn_colors = tape.sigmoid(dyn_app.colors);
    let dyn_opac = tape.sigmoid(dyn_app.opacities);
    let bias = (cfg.dyn_scale_frac * cfg.mesh.geometry.radius()).ln();
    let scl = tape.add_scalar(dyn_app.scales, bias);
    let dyn_scales = tape.exp(scl);
    let dyn_rots = tape.normalize_rows(dyn_app.rotations);
    AssembledVars {
        positions: tape.concat(0, &[stat.positions, dyn_positions]),
        colors: tape.concat(0, &[stat.colors, dyn_colors]),
        opacities: tape.concat(0, &[stat.opacities, dyn_opac]),
        scales: tape.concat(0, &[stat.scales, dyn_scales]),
        rotations: tape.concat(0, &[stat.rotations, dyn_rots]),
    }
}

pub fn init_generator(store: &mut WeightStore, cfg: &ModelConfig, seed: u64) {
    let k = cfg.mesh.vertex_count;
    let d_in = cfg.backbone.width + cfg.backbone.fused_channels + cfg.vertex_embed;
    let h = cfg.static_hidden;
    weights::init_matrix(store, seed, "gen.vertex_embed", k, cfg.vertex_embed, 0.3);
    weights::init_linear(store, seed, "gen.static.1.w", d_in, h);
    weights::init_zeros1(store, "gen.static.1.b", h);
    weights::init_linear(store, seed, "gen.static.2.w", h, h);
    weights::init_zeros1(store, "gen.static.2.b", h);
    weights::init_zeros2(store, "gen.static.offset.w", h, 3);
    weights::init_zeros1(store, "gen.static.offset.b", 3);
    weights::init_linear(store, seed, "gen.static.color.w", h, 3);
    weights::init_zeros1(store, "gen.static.color.b", 3);
    weights::init_linear(store, seed, "gen.static.opacity.w", h, 1);
    weights::init_zeros1(store, "gen.static.opacity.b", 1);
    weights::init_linear(store, seed, "gen.static.scale.w", h, 3);
    weights::init_zeros1(store, "gen.static.scale.b", 3);
    weights::init_matrix(store, seed, "gen.static.rot.w", h, 4, 0.01);
    store.insert("gen.static.rot.b", ndarray::arr1(&[1.0, 0.0, 0.0, 0.0]).into_dyn());

    let c = cfg.dyn_channels;
    weights::init_conv(store, seed, "gen.dyn.conv0.w", c, cfg.backbone.fused_channels, 3);
    weights::init_zeros1(store, "gen.dyn.conv0.b", c);
    let mut size = cfg.feat_grid();
    let mut stage = 0;
    while size < cfg.dyn_grid {
        weights::init_conv(store, seed, &format!("gen.dyn.up{stage}.w"), c, c, 3);
        weights::init_zeros1(store, &format!("gen.dyn.up{stage}.b"), c);
        size *= 2;
        stage += 1;
    }
    weights::init_conv(store, seed, "gen.dyn.head.w", 11, c, 1);
    let mut head_bias = Array1::<f64>::zeros(11);
    head_bias[7] = 1.0; // identity quaternion (w, x, y, z)
    store.insert("gen.dyn.head.b", head_bias.into_dyn());
}

// ---- avatar container ----

pub const AVATAR_MAGIC: &[u8; 8] = b"GHAVTR1\0";
pub const AVATAR_VERSION: u32 = 1;

impl AvatarState {
    /// Snaps every float block through f32 so serialization round-trips
    /// bit-exactly in both directions.
    pub fn snapped(mut self) -> Self {
        for arr in [
            &mut self.dyn_appearance.colors,
            &mut self.dyn_appearance.scales,
            &mut self.dyn_appearance.rotations,
        ] {
            arr.mapv_inplace(snap_f32);
        }
        self.dyn_appearance.opacities.mapv_inplace(snap_f32);
        self.static_set.positions.mapv_inplace(snap_f32);
        self.static_set.colors.mapv_inplace(snap_f32);
        self.static_set.opacities.mapv_inplace(snap_f32);
        self.static_set.scales.mapv_inplace(snap_f32);
        self.static_set.rotations.mapv_inplace(snap_f32);
        self.restore_features.mapv_inplace(snap_f32);
        self
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(AVATAR_MAGIC)?;
        w.write_all(&AVATAR_VERSION.to_le_bytes())?;
        let cfg = self.provenance.config_json.as_bytes();
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(cfg)?;
        w.write_all(&self.provenance.checkpoint_hash)?;
        self.static_set.write_to(w)?;
        let n = self.dyn_appearance.colors.nrows() as u64;
        w.write_all(&n.to_le_bytes())?;
        gauss::write_f32_block(w, self.dyn_appearance.colors.as_slice().unwrap())?;
        gauss::write_f32_block(w, self.dyn_appearance.opacities.as_slice().unwrap())?;
        gauss::write_f32_block(w, self.dyn_appearance.scales.as_slice().unwrap())?;
        gauss::write_f32_block(w, self.dyn_appearance.rotations.as_slice().unwrap())?;
        let fs = self.restore_features.shape();
        for d in fs {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        gauss::write_f32_block(w, self.restore_features.as_slice().unwrap())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != AVATAR_MAGIC {
            return Err(Error::format("bad avatar magic"));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)?;
        if u32::from_le_bytes(ver) != AVATAR_VERSION {
            return Err(Error::format("unsupported avatar version"));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)?;
        let cfg_len = u64::from_le_bytes(len8) as usize;
        if cfg_len > 1 << 20 {
            return Err(Error::format("implausible avatar config length"));
        }
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)?;
        let config_json = String::from_utf8(cfg_bytes).map_err(|e| Error::format(e.to_string()))?;
        let mut checkpoint_hash = [0u8; 32];
        r.read_exact(&mut checkpoint_hash)?;
        let static_set = GaussianSet::read_from(r)?;
        r.read_exact(&mut len8)?;
        let n = u64::from_le_bytes(len8) as usize;
        if n > 1_000_000 {
            return Err(Error::format("implausible dynamic gaussian count"));
        }
        let colors = gauss::read_f32_matrix(r, n, 3)?;
        let opacities = Array1::from(gauss::read_f32_vec(r, n)?);
        let scales = gauss::read_f32_matrix(r, n, 3)?;
        let rotations = gauss::read_f32_matrix(r, n, 4)?;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut len8)?;
            *d = u64::from_le_bytes(len8) as usize;
        }
        if dims.iter().product::<usize>() > 100_000_000 {
            return Err(Error::format("implausible feature block size"));
        }
        let feat = gauss::read_f32_vec(r, dims[0] * dims[1] * dims[2])?;
        let restore_features = Array3::from_shape_vec((dims[0], dims[1], dims[2]), feat)
            .map_err(|e| Error::shape(e.to_string()))?;
        for v in restore_features.iter().chain(colors.iter()).chain(scales.iter()).chain(rotations.iter()).chain(opacities.iter()) {
            if !v.is_finite() {
                return Err(Error::NonFinite("avatar block".into()));
            }
        }
        Ok(AvatarState {
            static_set,
            dyn_appearance: DynamicAppearance { colors, opacities, scales, rotations },
            restore_features,
            provenance: Provenance { config_json, checkpoint_hash },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::toy_head_mesh;

    pub(crate) fn tiny_cfg() -> ModelConfig {
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
            mesh: crate::config::MeshConfig { vertex_count: 64, ..Default::default() },
            static_hidden: 24,
            vertex_embed: 8,
            dyn_channels: 8,
            ..Default::default()
        }
    }

    fn fake_inputs(tape: &mut Tape, cfg: &ModelConfig) -> (Var, Var) {
        let g = cfg.feat_grid();
        let fmap = tape.constant3(Array3::from_shape_fn(
            (cfg.backbone.fused_channels, g, g),
            |(c, i, j)| ((c * 7 + i * 3 + j) % 13) as f64 * 0.1 - 0.6,
        ));
        let global = tape.constant1(Array1::from_shape_fn(cfg.backbone.width, |i| (i % 5) as f64 * 0.2 - 0.4));
        (fmap, global)
    }

    #[test]
    fn static_block_outputs_k_gaussians_on_mesh_at_init() {
        let cfg = tiny_cfg();
        let mesh = toy_head_mesh(&cfg.mesh).unwrap();
        let mut store = WeightStore::new();
        init_generator(&mut store, &cfg, 7);
        let mut tape = Tape::inference();
        let (fmap, global) = fake_inputs(&mut tape, &cfg);
        let sv = generate_static(&mut tape, &store, &cfg, &mesh, fmap, global).unwrap();
        assert_eq!(tape.val(sv.positions).shape(), &[64, 3]);
        // Zero-init offset head: positions equal mesh vertices exactly.
        assert_eq!(tape.val2(sv.positions), mesh.vertices);
    }

    #[test]
    fn static_offsets_never_exceed_clamp() {
        let cfg = tiny_cfg();
        let mesh = toy_head_mesh(&cfg.mesh).unwrap();
        let mut store = WeightStore::new();
        init_generator(&mut store, &cfg, 7);
        // Large random offset head to push against the clamp.
        weights::init_matrix(&mut store, 3, "gen.static.offset.w", cfg.static_hidden, 3, 10.0);
        let mut tape = Tape::inference();
        let (fmap, global) = fake_inputs(&mut tape, &cfg);
        let sv = generate_static(&mut tape, &store, &cfg, &mesh, fmap, global).unwrap();
        let clamp = cfg.offset_clamp * cfg.mesh.geometry.radius();
        let pos = tape.val2(sv.positions);
        for (p, v) in pos.rows().into_iter().zip(mesh.vertices.rows()) {
            for c in 0..3 {
                assert!((p[c] - v[c]).abs() <= clamp + 1e-12);
            }
        }
    }

    #[test]
    fn dynamic_block_grid_matches_config() {
        let cfg = tiny_cfg();
        let mut store = WeightStore::new();
        init_generator(&mut store, &cfg, 7);
        let mut tape = Tape::inference();
        let (fmap, _) = fake_inputs(&mut tape, &cfg);
        let dv = generate_dynamic_appearance(&mut tape, &store, &cfg, fmap).unwrap();
        assert_eq!(tape.val(dv.colors).shape(), &[256, 3]);
        assert_eq!(tape.val(dv.opacities).shape(), &[256]);
        assert_eq!(tape.val(dv.rotations).shape(), &[256, 4]);
    }

    #[test]
    fn assemble_respects_size_contract_and_static_slice() {
        let cfg = tiny_cfg();
        let mesh = toy_head_mesh(&cfg.mesh).unwrap();
        let mut store = WeightStore::new();
        init_generator(&mut store, &cfg, 7);
        let mut tape = Tape::inference();
        let (fmap, global) = fake_inputs(&mut tape, &cfg);
        let sv = generate_static(&mut tape, &store, &cfg, &mesh, fmap, global).unwrap();
        let dv = generate_dynamic_appearance(&mut tape, &store, &cfg, fmap).unwrap();

        let static_set = GaussianSet::from_activated(
            tape.val2(sv.positions),
            tape.val2(sv.colors),
            tape.val(sv.opacities).clone().into_dimensionality().unwrap(),
            tape.val2(sv.scales),
            tape.val2(sv.rotations),
        )
        .unwrap();
        let state = AvatarState {
            static_set: static_set.clone(),
            dyn_appearance: DynamicAppearance {
                colors: tape.val2(dv.colors),
                opacities: tape.val(dv.opacities).clone().into_dimensionality().unwrap(),
                scales: tape.val2(dv.scales),
                rotations: tape.val2(dv.rotations),
            },
            restore_features: Array3::zeros((16, 8, 8)),
            provenance: Provenance { config_json: "{}".into(), checkpoint_hash: [0; 32] },
        };
        let positions = Array2::from_shape_fn((cfg.n_dyn(), 3), |(i, j)| (i as f64 * 0.001) + j as f64 * 0.01);
        let full = assemble(&cfg, &state, &positions).unwrap();
        assert_eq!(full.len(), 64 + 256);
        assert_eq!(full.positions.slice(ndarray::s![..64, ..]), static_set.positions);
        assert_eq!(full.positions.slice(ndarray::s![64.., ..]), positions);

        // Count mismatch is an error.
        let bad = Array2::zeros((3, 3));
        assert!(assemble(&cfg, &state, &bad).is_err());
    }

    #[test]
    fn avatar_container_roundtrips_bit_exactly() {
        let cfg = tiny_cfg();
        let mesh = toy_head_mesh(&cfg.mesh).unwrap();
        let mut store = WeightStore::new();
        init_generator(&mut store, &cfg, 7);
        let mut tape = Tape::inference();
        let (fmap, global) = fake_inputs(&mut tape, &cfg);
        let sv = generate_static(&mut tape, &store, &cfg, &mesh, fmap, global).unwrap();
        let dv = generate_dynamic_appearance(&mut tape, &store, &cfg, fmap).unwrap();
        let state = AvatarState {
            static_set: GaussianSet::from_activated(
                tape.val2(sv.positions),
                tape.val2(sv.colors),
                tape.val(sv.opacities).clone().into_dimensionality().unwrap(),
                tape.val2(sv.scales),
                tape.val2(sv.rotations),
            )
            .unwrap(),
            dyn_appearance: DynamicAppearance {
                colors: tape.val2(dv.colors),
                opacities: tape.val(dv.opacities).clone().into_dimensionality().unwrap(),
                scales: tape.val2(dv.scales),
                rotations: tape.val2(dv.rotations),
            },
            restore_features: Array3::from_shape_fn((16, 8, 8), |(c, i, j)| (c + i + j) as f64 * 0.03),
            provenance: Provenance { config_json: "{\"x\":1}".into(), checkpoint_hash: [7; 32] },
        }
        .snapped();

        let mut buf = Vec::new();
        state.write_to(&mut buf).unwrap();
        let back = AvatarState::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(state, back);
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn avatar_container_rejects_truncation() {
        let cfg = tiny_cfg();
        let _ = cfg;
        let mut buf = Vec::new();
        buf.extend_from_slice(AVATAR_MAGIC);
        buf.extend_from_slice(&AVATAR_VERSION.to_le_bytes());
        buf.extend_from_slice(&1000u64.to_le_bytes());
        assert!(AvatarState::read_from(&mut buf.as_slice()).is_err());
    }

    use ndarray::{Array1, Array3};
}
