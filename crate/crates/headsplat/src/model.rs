//! The full pipeline: reconstruction (backbone + canonicalization + Gaussian
//! generation) run once per avatar, and the per-frame drive loop (drive
//! network + assemble + splat + refine) that never touches reconstruction
//! weights. Module invocations are counted so the separation property is a
//! tested fact, not a comment.

use ndarray::{Array1, Array2, Array3};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::camera::Camera;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gauss::GaussianSet;
use crate::generator::{
    assemble, assemble_on_tape, generate_dynamic_appearance, generate_static, init_generator,
    AvatarState, DynamicAppearance, Provenance,
};
use crate::img::Image;
use crate::mesh::{toy_head_mesh, CanonicalMesh};
use crate::reenact::{drive_positions, init_reenact};
use crate::render::{splat_op, RenderOptions};
use crate::restore::{compute_gamma_beta, init_restore, refine_with, GammaBeta};
use crate::tape::{Tape, Var};
use crate::weights::WeightStore;
use crate::{backbone, canon};

/// Invocation counters for the reconstruction-side blocks.
#[derive(Debug, Default)]
pub struct Counters {
    pub extract_features: AtomicU64,
    pub canonicalize: AtomicU64,
    pub generate_static: AtomicU64,
    pub generate_dynamic: AtomicU64,
}

impl Counters {
    pub fn snapshot(&self) -> [u64; 4] {
        [
            self.extract_features.load(Ordering::SeqCst),
            self.canonicalize.load(Ordering::SeqCst),
            self.generate_static.load(Ordering::SeqCst),
            self.generate_dynamic.load(Ordering::SeqCst),
        ]
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: WeightStore,
    pub mesh: CanonicalMesh,
    pub counters: Counters,
}

/// Runtime avatar: the serializable state plus the per-avatar caches the
/// drive loop consumes (precomputed restorer modulation maps).
pub struct Avatar {
    pub state: AvatarState,
    gamma_beta: Vec<(Array3<f64>, Array3<f64>)>,
}

/// Everything forward_train exposes besides the final image.
pub struct TrainForward {
    pub pred: Var,
    pub raw_render: Var,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mesh = toy_head_mesh(&cfg.mesh)?;
        let mut store = WeightStore::new();
        backbone::init_backbone(&mut store, &cfg, seed);
        canon::init_canon(&mut store, &cfg, seed);
        init_generator(&mut store, &cfg, seed);
        init_reenact(&mut store, &cfg, seed);
        init_restore(&mut store, &cfg, seed);
        Ok(Model { cfg, store, mesh, counters: Counters::default() })
    }

    /// Rebuilds a model around restored weights (checkpoint load).
    pub fn from_store(cfg: ModelConfig, store: WeightStore) -> Result<Model> {
        cfg.validate()?;
        let mesh = toy_head_mesh(&cfg.mesh)?;
        Ok(Model { cfg, store, mesh, counters: Counters::default() })
    }

    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.cfg).expect("config serializes")
    }

    pub fn param_count(&self, prefix: &str) -> usize {
        self.store.param_count(prefix)
    }

    /// Multi-granularity feature extraction (reconstruction path).
    pub fn extract_features(&self, tape: &mut Tape, img: &Image) -> Result<(Var, Var)> {
        self.counters.extract_features.fetch_add(1, Ordering::SeqCst);
        backbone::extract_features(tape, &self.store, &self.cfg, img)
    }

    /// Expression canonicalization (reconstruction path).
    pub fn canonicalize(&self, tape: &mut Tape, fmap: Var, alpha_s: &Array1<f64>) -> Result<Var> {
        self.counters.canonicalize.fetch_add(1, Ordering::SeqCst);
        canon::canonicalize(tape, &self.store, &self.cfg, fmap, alpha_s.as_slice().unwrap())
    }

    /// Feature extraction + canonicalization.
    pub fn reconstruct(&self, tape: &mut Tape, img: &Image, alpha_s: &Array1<f64>) -> Result<(Var, Var)> {
        let (fmap, global) = self.extract_features(tape, img)?;
        let canonical = self.canonicalize(tape, fmap, alpha_s)?;
        Ok((canonical, global))
    }

    pub fn generate_static(&self, tape: &mut Tape, canonical: Var, global: Var) -> Result<crate::generator::StaticVars> {
        self.counters.generate_static.fetch_add(1, Ordering::SeqCst);
        generate_static(tape, &self.store, &self.cfg, &self.mesh, canonical, global)
    }

    pub fn generate_dynamic_appearance(&self, tape: &mut Tape, canonical: Var) -> Result<crate::generator::DynAppearanceVars> {
        self.counters.generate_dynamic.fetch_add(1, Ordering::SeqCst);
        generate_dynamic_appearance(tape, &self.store, &self.cfg, canonical)
    }

    /// Drive-path position prediction from the (eye ∥ mouth ∥ expression)
    /// sub-blocks of a full control vector.
    pub fn drive_positions_from_alpha(&self, tape: &mut Tape, alpha: &Array1<f64>) -> Result<Var> {
        let d = self.cfg.alpha.drive_dims();
        if alpha.len() != self.cfg.alpha.total() {
            return Err(Error::shape(format!(
                "alpha has {} entries, config says {}",
                alpha.len(),
                self.cfg.alpha.total()
            )));
        }
        let drive: Vec<f64> = alpha.iter().cloned().take(d).collect();
        drive_positions(tape, &self.store, &self.cfg, &drive)
    }

    /// Full differentiable pipeline for one training sample: source image +
    /// source condition build the avatar on-tape; the driving condition and
    /// camera produce the refined prediction.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        source: &Image,
        alpha_s: &Array1<f64>,
        alpha_d: &Array1<f64>,
        driving_cam: &Camera,
        opts: &RenderOptions,
    ) -> Result<TrainForward> {
        let (canonical, global) = self.reconstruct(tape, source, alpha_s)?;
        let stat = self.generate_static(tape, canonical, global)?;
        let dyn_app = self.generate_dynamic_appearance(tape, canonical)?;
        let dyn_pos = self.drive_positions_from_alpha(tape, alpha_d)?;
        let assembled = assemble_on_tape(tape, &self.cfg, &stat, &dyn_app, dyn_pos);
        let raw = splat_op(
            tape,
            assembled.positions,
            assembled.colors,
            assembled.opacities,
            assembled.scales,
            assembled.rotations,
            driving_cam,
            opts,
        )?;
        let gb = compute_gamma_beta(tape, &self.store, &self.cfg, canonical)?;
        let pred = refine_with(tape, &self.store, &self.cfg, raw, &gb)?;
        Ok(TrainForward { pred, raw_render: raw })
    }

    /// One-shot reconstruction: runs the reconstruction path once and freezes
    /// its products. The only step that touches the backbone.
    pub fn build_avatar(
        &self,
        source: &Image,
        alpha_s: &Array1<f64>,
        checkpoint_hash: [u8; 32],
    ) -> Result<Avatar> {
        let mut tape = Tape::inference();
        let (canonical, global) = self.reconstruct(&mut tape, source, alpha_s)?;
        let stat = self.generate_static(&mut tape, canonical, global)?;
        let dyn_app = self.generate_dynamic_appearance(&mut tape, canonical)?;
        let static_set = GaussianSet::from_activated(
            tape.val2(stat.positions),
            tape.val2(stat.colors),
            tape.val(stat.opacities).clone().into_dimensionality().map_err(|e| Error::shape(e.to_string()))?,
            tape.val2(stat.scales),
            tape.val2(stat.rotations),
        )?;
        let state = AvatarState {
            static_set,
            dyn_appearance: DynamicAppearance {
                colors: tape.val2(dyn_app.colors),
                opacities: tape.val(dyn_app.opacities).clone().into_dimensionality().map_err(|e| Error::shape(e.to_string()))?,
                scales: tape.val2(dyn_app.scales),
                rotations: tape.val2(dyn_app.rotations),
            },
            restore_features: tape.val3(canonical),
            provenance: Provenance { config_json: self.config_json(), checkpoint_hash },
        }
        .snapped();
        self.prepare_avatar(state)
    }

    /// Builds the runtime caches for a (possibly loaded) avatar state.
    pub fn prepare_avatar(&self, state: AvatarState) -> Result<Avatar> {
        let mut tape = Tape::inference();
        let cond = tape.constant3(state.restore_features.clone());
        let gb = compute_gamma_beta(&mut tape, &self.store, &self.cfg, cond)?;
        let gamma_beta = gb
            .maps
            .iter()
            .map(|(g, b)| (tape.val3(*g), tape.val3(*b)))
            .collect();
        Ok(Avatar { state, gamma_beta })
    }

    /// Assembles the full cloud for given dynamic positions (pure).
    pub fn assemble(&self, state: &AvatarState, dyn_positions: &Array2<f64>) -> Result<GaussianSet> {
        assemble(&self.cfg, state, dyn_positions)
    }

    /// The per-frame drive loop: control vector to refined frame. Touches only
    /// `reenact.*` and `restore.*` weights plus the frozen avatar.
    pub fn reenact(&self, avatar: &Avatar, alpha_d: &Array1<f64>, cam: &Camera) -> Result<Image> {
        self.reenact_with(avatar, alpha_d, cam, &ReenactSettings::default())
    }

    pub fn reenact_with(
        &self,
        avatar: &Avatar,
        alpha_d: &Array1<f64>,
        cam: &Camera,
        settings: &ReenactSettings,
    ) -> Result<Image> {
        let mut tape = Tape::inference();
        let pos = self.drive_positions_from_alpha(&mut tape, alpha_d)?;
        let cloud = self.assemble(&avatar.state, &tape.val2(pos))?;
        let opts = RenderOptions {
            parallel: settings.parallel,
            ..RenderOptions::default()
        };
        let raw = crate::render::render(&cloud, cam, &opts)?;
        if settings.no_restore {
            return Ok(raw);
        }
        let raw_v = tape.constant3(raw.data);
        let maps = avatar
            .gamma_beta
            .iter()
            .map(|(g, b)| (tape.constant3(g.clone()), tape.constant3(b.clone())))
            .collect();
        let out = refine_with(&mut tape, &self.store, &self.cfg, raw_v, &GammaBeta { maps })?;
        Image::new(tape.val3(out))
    }

    /// Stage timings for one drive-loop frame; used by the latency benchmark.
    pub fn reenact_timed(&self, avatar: &Avatar, alpha_d: &Array1<f64>, cam: &Camera) -> Result<(Image, [std::time::Duration; 3])> {
        use std::time::Instant;
        let t0 = Instant::now();
        let mut tape = Tape::inference();
        let pos = self.drive_positions_from_alpha(&mut tape, alpha_d)?;
        let pos_arr = tape.val2(pos);
        let t1 = Instant::now();
        let cloud = self.assemble(&avatar.state, &pos_arr)?;
        let raw = crate::render::render(&cloud, cam, &RenderOptions::default())?;
        let t2 = Instant::now();
        let raw_v = tape.constant3(raw.data);
        let maps = avatar
            .gamma_beta
            .iter()
            .map(|(g, b)| (tape.constant3(g.clone()), tape.constant3(b.clone())))
            .collect();
        let out = refine_with(&mut tape, &self.store, &self.cfg, raw_v, &GammaBeta { maps })?;
        let img = Image::new(tape.val3(out))?;
        let t3 = Instant::now();
        Ok((img, [t1 - t0, t2 - t1, t3 - t2]))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReenactSettings {
    /// Skip the texture restorer (ablation renders).
    pub no_restore: bool,
    /// Row-parallel rasterization.
    pub parallel: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackboneConfig;
    use crate::rng::substream;
    use ndarray::Array3;
    use rand::Rng;

    pub(crate) fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            resolution: 32,
            backbone: BackboneConfig {
                width: 24,
                depth: 2,
                heads: 4,
                mlp_ratio: 2,
                tap_layers: vec![0, 1],
                tap_channels: 6,
                fused_channels: 16,
                patch: 8,
            },
            mesh: crate::config::MeshConfig { vertex_count: 48, ..Default::default() },
            canon_blocks: 1,
            canon_heads: 4,
            canon_ctx_tokens: 2,
            static_hidden: 20,
            vertex_embed: 6,
            dyn_grid: 8,
            dyn_channels: 8,
            reenact_hidden: 12,
            reenact_channels: 6,
            restore_channels: 4,
            restore_blocks: 3,
            ..Default::default()
        }
    }

    fn random_image(seed: u64, res: usize) -> Image {
        let mut rng = substream(seed, "model-test");
        Image::new(Array3::from_shape_fn((res, res, 3), |_| rng.gen::<f64>())).unwrap()
    }

    fn random_alpha(seed: u64, n: usize) -> Array1<f64> {
        let mut rng = substream(seed, "model-alpha");
        Array1::from_shape_fn(n, |_| rng.gen::<f64>() * 1.6 - 0.8)
    }

    #[test]
    fn build_avatar_is_deterministic_and_sized() {
        let cfg = tiny_model_cfg();
        let model = Model::init(cfg.clone(), 5).unwrap();
        let img = random_image(1, 32);
        let alpha = random_alpha(2, cfg.alpha.total());
        let a1 = model.build_avatar(&img, &alpha, [1; 32]).unwrap();
        let a2 = model.build_avatar(&img, &alpha, [1; 32]).unwrap();
        assert_eq!(a1.state, a2.state);
        assert_eq!(a1.state.static_set.len(), 48);
        assert_eq!(a1.state.dyn_appearance.colors.nrows(), 64);
    }

    #[test]
    fn reenact_never_touches_reconstruction() {
        let cfg = tiny_model_cfg();
        let mut model = Model::init(cfg.clone(), 5).unwrap();
        let img = random_image(3, 32);
        let alpha = random_alpha(4, cfg.alpha.total());
        let avatar = model.build_avatar(&img, &alpha, [0; 32]).unwrap();
        let cam = Camera::frontal(32, 43.0, 4.0);

        let before = model.counters.snapshot();
        model.store.enable_access_log();
        let f1 = model.reenact(&avatar, &alpha, &cam).unwrap();
        let f2 = model.reenact(&avatar, &alpha, &cam).unwrap();
        let log = model.store.take_access_log();
        let after = model.counters.snapshot();

        assert_eq!(before, after, "reenact must not invoke reconstruction blocks");
        assert_eq!(f1.data, f2.data, "reenact must be deterministic");
        assert!(
            log.iter().all(|k| k.starts_with("reenact.") || k.starts_with("restore.")),
            "drive path read unexpected weights: {log:?}"
        );
    }

    #[test]
    fn static_part_is_independent_of_driving_alpha() {
        let cfg = tiny_model_cfg();
        let model = Model::init(cfg.clone(), 5).unwrap();
        let img = random_image(6, 32);
        let alpha_s = random_alpha(7, cfg.alpha.total());
        let avatar = model.build_avatar(&img, &alpha_s, [0; 32]).unwrap();
        let a_d1 = random_alpha(8, cfg.alpha.total());
        let a_d2 = random_alpha(9, cfg.alpha.total());

        let pos = |a: &Array1<f64>| {
            let mut tape = Tape::inference();
            let p = model.drive_positions_from_alpha(&mut tape, a).unwrap();
            tape.val2(p)
        };
        let full1 = model.assemble(&avatar.state, &pos(&a_d1)).unwrap();
        let full2 = model.assemble(&avatar.state, &pos(&a_d2)).unwrap();
        let k = avatar.state.static_set.len();
        assert_eq!(
            full1.positions.slice(ndarray::s![..k, ..]),
            full2.positions.slice(ndarray::s![..k, ..]),
            "static slice must be bit-identical across driving vectors"
        );
        assert_eq!(full1.colors.slice(ndarray::s![..k, ..]), full2.colors.slice(ndarray::s![..k, ..]));
    }

    #[test]
    fn forward_train_runs_and_backward_reaches_all_modules() {
        let cfg = tiny_model_cfg();
        let model = Model::init(cfg.clone(), 5).unwrap();
        let img = random_image(10, 32);
        let target = random_image(11, 32);
        let alpha = random_alpha(12, cfg.alpha.total());
        let cam = Camera::frontal(32, 43.0, 4.0);
        let mut tape = Tape::training();
        let fwd = model
            .forward_train(&mut tape, &img, &alpha, &alpha, &cam, &RenderOptions::default())
            .unwrap();
        let tgt = tape.constant3(target.data.clone());
        let (loss, _, _) = crate::losses::pretrain_loss_on_tape(&mut tape, &Default::default(), fwd.pred, tgt).unwrap();
        let grads = tape.backward(loss);
        let named = tape.param_grads(&grads);
        for prefix in ["backbone.", "canon.", "gen.", "reenact.", "restore."] {
            let norm: f64 = named
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
                .sum();
            assert!(norm > 0.0, "no gradient reached {prefix}");
        }
    }

    #[test]
    fn avatar_roundtrip_preserves_reenact_output() {
        let cfg = tiny_model_cfg();
        let model = Model::init(cfg.clone(), 5).unwrap();
        let img = random_image(13, 32);
        let alpha = random_alpha(14, cfg.alpha.total());
        let avatar = model.build_avatar(&img, &alpha, [9; 32]).unwrap();
        let mut buf = Vec::new();
        avatar.state.write_to(&mut buf).unwrap();
        let state = AvatarState::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(state, avatar.state);
        let reloaded = model.prepare_avatar(state).unwrap();
        let cam = Camera::frontal(32, 43.0, 4.0);
        let f1 = model.reenact(&avatar, &alpha, &cam).unwrap();
        let f2 = model.reenact(&reloaded, &alpha, &cam).unwrap();
        assert_eq!(f1.data, f2.data);
    }
}
