//! Configuration types. Everything is plain serde data with full-key validation
//! (`deny_unknown_fields`), so a typo in a JSON config is a hard error instead
//! of a silently ignored knob.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ellipsoidal head geometry shared by the canonical mesh, the synthetic world,
/// and the position clamps of the generator and reenactor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadGeometry {
    /// Semi-axes (x = right, y = up, z = front), world units.
    pub semi_axes: [f64; 3],
}

impl Default for HeadGeometry {
    fn default() -> Self {
        Self { semi_axes: [0.75, 1.0, 0.85] }
    }
}

impl HeadGeometry {
    /// Largest semi-axis; used as the "head radius" for clamps.
    pub fn radius(&self) -> f64 {
        self.semi_axes.iter().cloned().fold(0.0, f64::max)
    }
}

/// Canonical mesh generation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Total vertex count K.
    pub vertex_count: usize,
    pub geometry: HeadGeometry,
    /// Fraction of vertices concentrated in the eye/mouth zones.
    pub zone_fraction: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { vertex_count: 512, geometry: HeadGeometry::default(), zone_fraction: 0.4 }
    }
}

/// Scale knobs of the feature-extraction backbone. The scaling experiment
/// varies `width` only; everything downstream of the fused feature map is
/// deliberately independent of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Token embedding width.
    pub width: usize,
    /// Transformer block count.
    pub depth: usize,
    pub heads: usize,
    /// MLP hidden = width * mlp_ratio.
    pub mlp_ratio: usize,
    /// Block indices whose token grids are tapped for the multi-granularity fusion.
    pub tap_layers: Vec<usize>,
    /// Channels of each per-tap convolution.
    pub tap_channels: usize,
    /// Channels of the fused feature map (fixed across widths).
    pub fused_channels: usize,
    /// Square patch edge, pixels.
    pub patch: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 256,
            depth: 6,
            heads: 4,
            mlp_ratio: 2,
            tap_layers: vec![2, 5],
            tap_channels: 48,
            fused_channels: 64,
            patch: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.patch == 0 {
            return Err(Error::InvalidConfig("backbone dims must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::InvalidConfig("need at least one tap layer".into()));
        }
        for &t in &self.tap_layers {
            if t >= self.depth {
                return Err(Error::InvalidConfig(format!(
                    "tap layer {t} out of range for depth {}",
                    self.depth
                )));
            }
        }
        Ok(())
    }
}

/// Sub-block layout of the control vector α. The concatenation order is fixed:
/// eye, mouth, expression, pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaLayout {
    pub eye: usize,
    pub mouth: usize,
    pub expression: usize,
    pub pose: usize,
}

impl Default for AlphaLayout {
    fn default() -> Self {
        Self { eye: 4, mouth: 8, expression: 8, pose: 6 }
    }
}

impl AlphaLayout {
    pub fn total(&self) -> usize {
        self.eye + self.mouth + self.expression + self.pose
    }
    /// Dimensions consumed by the drive network (everything except pose,
    /// which moves the camera instead).
    pub fn drive_dims(&self) -> usize {
        self.eye + self.mouth + self.expression
    }
    pub fn eye_range(&self) -> std::ops::Range<usize> {
        0..self.eye
    }
    pub fn mouth_range(&self) -> std::ops::Range<usize> {
        self.eye..self.eye + self.mouth
    }
    pub fn expression_range(&self) -> std::ops::Range<usize> {
        self.eye + self.mouth..self.eye + self.mouth + self.expression
    }
    pub fn pose_range(&self) -> std::ops::Range<usize> {
        let p = self.eye + self.mouth + self.expression;
        p..p + self.pose
    }
}

/// Full model architecture. One of these pins every tensor shape in the
/// pipeline; two models with equal configs have interchangeable checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Render / input resolution (square), pixels.
    pub resolution: usize,
    pub backbone: BackboneConfig,
    pub alpha: AlphaLayout,
    pub mesh: MeshConfig,
    /// Canonicalization transformer depth L.
    pub canon_blocks: usize,
    pub canon_heads: usize,
    /// Context tokens produced from α_s for cross-attention.
    pub canon_ctx_tokens: usize,
    /// Hidden width of the per-vertex static MLP.
    pub static_hidden: usize,
    /// Learned per-vertex embedding width.
    pub vertex_embed: usize,
    /// Static position offsets are clamped to this fraction of the head radius.
    pub offset_clamp: f64,
    /// Dynamic Gaussian grid edge; N_dyn = dyn_grid².
    pub dyn_grid: usize,
    /// Channels of the dynamic-appearance convolution stack.
    pub dyn_channels: usize,
    /// Drive network: MLP hidden width and conv channels.
    pub reenact_hidden: usize,
    pub reenact_channels: usize,
    /// Texture restorer: trunk channels and SFT block count.
    pub restore_channels: usize,
    pub restore_blocks: usize,
    /// Log-space bias applied to raw scales before exp, as a fraction of head
    /// radius: scale = exp(raw + ln(frac * radius)).
    pub static_scale_frac: f64,
    pub dyn_scale_frac: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            backbone: BackboneConfig::default(),
            alpha: AlphaLayout::default(),
            mesh: MeshConfig::default(),
            canon_blocks: 2,
            canon_heads: 4,
            canon_ctx_tokens: 4,
            static_hidden: 96,
            vertex_embed: 32,
            offset_clamp: 0.1,
            dyn_grid: 16,
            dyn_channels: 32,
            reenact_hidden: 32,
            reenact_channels: 8,
            restore_channels: 8,
            restore_blocks: 3,
            static_scale_frac: 0.08,
            dyn_scale_frac: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn n_dyn(&self) -> usize {
        self.dyn_grid * self.dyn_grid
    }
    /// Feature grid edge after patchification.
    pub fn feat_grid(&self) -> usize {
        self.resolution / self.backbone.patch
    }
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.resolution % self.backbone.patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "resolution {} not divisible by patch {}",
                self.resolution, self.backbone.patch
            )));
        }
        if self.backbone.fused_channels % self.canon_heads != 0 {
            return Err(Error::InvalidConfig(
                "fused_channels must be divisible by canon_heads".into(),
            ));
        }
        if self.mesh.vertex_count < 16 {
            return Err(Error::InvalidConfig("mesh vertex_count must be >= 16".into()));
        }
        if self.dyn_grid < 2 || self.dyn_grid % 2 != 0 {
            return Err(Error::InvalidConfig("dyn_grid must be even and >= 2".into()));
        }
        if self.restore_blocks == 0 {
            return Err(Error::InvalidConfig("restore_blocks must be >= 1".into()));
        }
        Ok(())
    }
}

/// Synthetic-world dataset knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_identities: usize,
    pub heldout_identities: usize,
    pub frames_per_identity: usize,
    pub resolution: usize,
    /// Pinhole focal length, pixels.
    pub focal: f64,
    /// Mean camera distance, world units.
    pub camera_distance: f64,
    pub geometry: HeadGeometry,
    /// Motion random-walk step per frame (α units).
    pub walk_step: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_identities: 8,
            heldout_identities: 2,
            frames_per_identity: 300,
            resolution: 64,
            focal: 86.0,
            camera_distance: 4.0,
            geometry: HeadGeometry::default(),
            walk_step: 0.12,
        }
    }
}

/// Two-stage training knobs. Loss weights follow the global-pretrain /
/// finetune recipe: perceptual 0.01, L1 1.0, region 0.05.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub lambda_perceptual: f64,
    pub lambda_l1: f64,
    pub lambda_region: f64,
    /// σ of the Gaussian jitter applied by the condition-extraction oracle.
    pub condition_noise: f64,
    /// Frame subsampling interval applied to each sequence before pairing.
    pub subsample_interval: usize,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Adam betas and epsilon.
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Checkpoint/log cadence in steps (0 = only at the end).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            max_steps: 5000,
            lambda_perceptual: 0.01,
            lambda_l1: 1.0,
            lambda_region: 0.05,
            condition_noise: 0.02,
            subsample_interval: 5,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    /// The stage-2 preset: restorer-only finetune at a lower learning rate.
    pub fn finetune_defaults() -> Self {
        Self { learning_rate: 5e-5, max_steps: 2000, ..Self::default() }
    }
}

/// Restoration-set generation knobs (stage-2 data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestorationSetConfig {
    pub identities: usize,
    pub drivers_per_identity: usize,
    pub frames_per_driver: usize,
}

impl Default for RestorationSetConfig {
    fn default() -> Self {
        Self { identities: 8, drivers_per_identity: 5, frames_per_driver: 50 }
    }
}

impl RestorationSetConfig {
    pub fn pair_count(&self) -> usize {
        self.identities * self.drivers_per_identity * self.frames_per_driver
    }
}

/// Top-level run configuration consumed by the CLI. Command-line flags
/// override individual fields; the resolved config is logged verbatim.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub restoration: RestorationSetConfig,
    /// Frames timed by the latency benchmark.
    pub bench_frames: usize,
    /// Warmup frames excluded from latency statistics.
    pub bench_warmup: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.dataset.resolution != self.model.resolution {
            return Err(Error::InvalidConfig(format!(
                "dataset resolution {} != model resolution {}",
                self.dataset.resolution, self.model.resolution
            )));
        }
        if self.bench_frames <= self.bench_warmup {
            return Err(Error::InvalidConfig("bench_frames must exceed bench_warmup".into()));
        }
        Ok(())
    }
}

pub fn default_run_config() -> RunConfig {
    RunConfig {
        seed: 0,
        bench_frames: 500,
        bench_warmup: 50,
        finetune: TrainConfig::finetune_defaults(),
        ..Default::default()
    }
}
