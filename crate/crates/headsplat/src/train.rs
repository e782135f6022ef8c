//! Two-stage optimization. Stage 1 (global pretrain) updates every module
//! end-to-end with perceptual + L1 supervision on same-identity frame pairs.
//! Stage 2 (finetune) freezes everything except the texture restorer and
//! trains it on a synthetic restoration set of (raw render, analytic target)
//! pairs, adding the landmark-cropped eye/mouth term. Freezing is exact:
//! frozen blocks are bit-identical after stage 2.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::config::{DatasetConfig, ModelConfig, RestorationSetConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::gauss;
use crate::generator::AvatarState;
use crate::img::Image;
use crate::losses;
use crate::model::Model;
use crate::render::RenderOptions;
use crate::rng::substream_indexed;
use crate::synth::{self, Frame};
use crate::tape::Tape;
use crate::weights::WeightStore;

// ---- checkpoint container ----
//
// Layout (little-endian): magic, version, config JSON (u64 len + bytes),
// step u64, adam step u64, block count u64, then per block: kind u8
// (0 weight / 1 adam-m / 2 adam-v), name (u16 len + utf8), ndim u8,
// dims u32 each, f32 payload.

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GHCKPT1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub adam_step: u64,
    pub weights: IndexMap<String, ArrayD<f64>>,
    pub opt_m: IndexMap<String, ArrayD<f64>>,
    pub opt_v: IndexMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    /// Captures the model weights (f32-snapped) and optimizer state.
    pub fn capture(model: &Model, step: u64, opt: Option<&Adam>) -> Checkpoint {
        let mut weights = IndexMap::new();
        for (name, arr) in model.store.iter() {
            weights.insert(name.clone(), arr.mapv(gauss::snap_f32));
        }
        let (opt_m, opt_v, adam_step) = match opt {
            Some(a) => (
                a.m.iter().map(|(k, v)| (k.clone(), v.mapv(gauss::snap_f32))).collect(),
                a.v.iter().map(|(k, v)| (k.clone(), v.mapv(gauss::snap_f32))).collect(),
                a.t,
            ),
            None => (IndexMap::new(), IndexMap::new(), 0),
        };
        Checkpoint { config: model.cfg.clone(), step, adam_step, weights, opt_m, opt_v }
    }

    /// Instantiates a model from this checkpoint's weights.
    pub fn to_model(&self) -> Result<Model> {
        let mut store = WeightStore::new();
        for (k, v) in &self.weights {
            store.insert(k.clone(), v.clone());
        }
        Model::from_store(self.config.clone(), store)
    }

    pub fn config_hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(&self.config).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().into()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let json = serde_json::to_string(&self.config)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(json.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.adam_step.to_le_bytes())?;
        let count = self.weights.len() + self.opt_m.len() + self.opt_v.len();
        w.write_all(&(count as u64).to_le_bytes())?;
        for (kind, map) in [(0u8, &self.weights), (1, &self.opt_m), (2, &self.opt_v)] {
            for (name, arr) in map {
                w.write_all(&[kind])?;
                let nb = name.as_bytes();
                w.write_all(&(nb.len() as u16).to_le_bytes())?;
                w.write_all(nb)?;
                w.write_all(&[arr.ndim() as u8])?;
                for d in arr.shape() {
                    w.write_all(&(*d as u32).to_le_bytes())?;
                }
                gauss::write_f32_block(w, arr.as_slice().expect("contiguous block"))?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let mut u4 = [0u8; 4];
        r.read_exact(&mut u4)?;
        if u32::from_le_bytes(u4) != CHECKPOINT_VERSION {
            return Err(Error::format("unsupported checkpoint version"));
        }
        let mut u8b = [0u8; 8];
        r.read_exact(&mut u8b)?;
        let json_len = u64::from_le_bytes(u8b) as usize;
        if json_len > 1 << 20 {
            return Err(Error::format("implausible checkpoint config length"));
        }
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let config: ModelConfig = serde_json::from_slice(&json)?;
        r.read_exact(&mut u8b)?;
        let step = u64::from_le_bytes(u8b);
        r.read_exact(&mut u8b)?;
        let adam_step = u64::from_le_bytes(u8b);
        r.read_exact(&mut u8b)?;
        let count = u64::from_le_bytes(u8b) as usize;
        if count > 100_000 {
            return Err(Error::format("implausible checkpoint block count"));
        }
        let mut weights = IndexMap::new();
        let mut opt_m = IndexMap::new();
        let mut opt_v = IndexMap::new();
        for _ in 0..count {
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            let mut u2 = [0u8; 2];
            r.read_exact(&mut u2)?;
            let name_len = u16::from_le_bytes(u2) as usize;
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb).map_err(|e| Error::format(e.to_string()))?;
            let mut nd = [0u8; 1];
            r.read_exact(&mut nd)?;
            let ndim = nd[0] as usize;
            if ndim > 4 {
                return Err(Error::format("implausible block rank"));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut u4)?;
                dims.push(u32::from_le_bytes(u4) as usize);
            }
            let len: usize = dims.iter().product();
            if len > 100_000_000 {
                return Err(Error::format("implausible block size"));
            }
            let data = gauss::read_f32_vec(r, len)?;
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
                .map_err(|e| Error::shape(e.to_string()))?;
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint block {name}")));
            }
            match kind[0] {
                0 => weights.insert(name, arr),
                1 => opt_m.insert(name, arr),
                2 => opt_v.insert(name, arr),
                k => return Err(Error::format(format!("unknown block kind {k}"))),
            };
        }
        Ok(Checkpoint { config, step, adam_step, weights, opt_m, opt_v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::cli::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::read_from(&mut bytes.as_slice())
    }

    /// SHA-256 of the serialized container; used as avatar provenance.
    pub fn content_hash(&self) -> Result<[u8; 32]> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        let mut h = Sha256::new();
        h.update(&buf);
        Ok(h.finalize().into())
    }
}

// ---- optimizer ----

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Adam {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn restore_state(&mut self, ckpt: &Checkpoint) {
        self.t = ckpt.adam_step;
        self.m = ckpt.opt_m.clone();
        self.v = ckpt.opt_v.clone();
    }

    pub fn state_keys(&self) -> Vec<String> {
        self.m.keys().cloned().collect()
    }

    /// One update over the given gradients. Only names present in `grads` are
    /// touched, which is what enforces the freeze contract bitwise.
    pub fn step(&mut self, store: &mut WeightStore, grads: &IndexMap<String, ArrayD<f64>>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *m = m.mapv(|x| x * self.beta1) + g.mapv(|x| x * (1.0 - self.beta1));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *v = v.mapv(|x| x * self.beta2) + g.mapv(|x| x * x * (1.0 - self.beta2));
            let w = store.get_mut(name)?;
            ndarray::Zip::from(w)
                .and(&*m)
                .and(&*v)
                .for_each(|wi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *wi -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `clip`.
pub fn clip_global_norm(grads: &mut IndexMap<String, ArrayD<f64>>, clip: f64) -> f64 {
    let norm: f64 = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > clip && norm > 0.0 {
        let s = clip / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

// ---- training data ----

/// In-memory training set: subsampled same-identity sequences.
pub struct TrainSet {
    pub sequences: Vec<Vec<Frame>>,
}

impl TrainSet {
    /// Generates and subsamples sequences directly from the synthetic world.
    pub fn generate(cfg: &DatasetConfig, tcfg: &TrainConfig, seed: u64, identities: &[u64]) -> Result<TrainSet> {
        let mut sequences = Vec::new();
        for &id in identities {
            let seq = synth::generate_sequence(cfg, id, seed, cfg.frames_per_identity)?;
            sequences.push(synth::subsample(&seq, tcfg.subsample_interval)?);
        }
        Ok(TrainSet { sequences })
    }

    /// Loads the `train/` split of an on-disk dataset, subsampled.
    pub fn load(root: &Path, tcfg: &TrainConfig) -> Result<TrainSet> {
        let mut sequences = Vec::new();
        let train = root.join("train");
        let mut dirs: Vec<_> = std::fs::read_dir(&train)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for d in dirs {
            let seq = synth::read_identity_dir(&d)?;
            sequences.push(synth::subsample(&seq, tcfg.subsample_interval)?);
        }
        if sequences.is_empty() {
            return Err(Error::InvalidConfig(format!("no identities under {}", train.display())));
        }
        Ok(TrainSet { sequences })
    }
}

#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: u64,
    pub total: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub region: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,l1,perceptual,region,wall_ms\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.total, r.l1, r.perceptual, r.region, r.wall_ms
            ));
        }
        s
    }

    /// Windowed means of the total loss, for the smoothed-decrease check.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let vals: Vec<f64> = self.rows.iter().map(|r| r.total).collect();
        vals.chunks(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }
}

struct SampleSpec {
    seq: usize,
    source: usize,
    driving: usize,
    alpha_s: Array1<f64>,
    alpha_d: Array1<f64>,
}

fn draw_batch(set: &TrainSet, tcfg: &TrainConfig, seed: u64, step: u64) -> Result<Vec<SampleSpec>> {
    let mut rng = substream_indexed(seed, "train/step", step);
    let mut batch = Vec::with_capacity(tcfg.batch_size);
    for _ in 0..tcfg.batch_size {
        let seq = rand::Rng::gen_range(&mut rng, 0..set.sequences.len());
        let frames = &set.sequences[seq];
        let (source, driving) = synth::sample_pair(frames.len(), &mut rng)?;
        let alpha_s = synth::extract_condition(&frames[source], tcfg.condition_noise, &mut rng);
        let alpha_d = synth::extract_condition(&frames[driving], tcfg.condition_noise, &mut rng);
        batch.push(SampleSpec { seq, source, driving, alpha_s, alpha_d });
    }
    Ok(batch)
}

struct SampleResult {
    grads: IndexMap<String, ArrayD<f64>>,
    total: f64,
    l1: f64,
    perceptual: f64,
}

/// Global pretraining: per step, sample same-identity (source, driving) pairs,
/// run the full pipeline from source through the restorer, and apply one Adam
/// update to every module. Deterministic given seeds.
pub fn pretrain(model: &mut Model, set: &TrainSet, tcfg: &TrainConfig, seed: u64) -> Result<TrainLog> {
    let mut opt = Adam::new(tcfg);
    pretrain_with(model, set, tcfg, seed, &mut opt)
}

pub fn pretrain_with(
    model: &mut Model,
    set: &TrainSet,
    tcfg: &TrainConfig,
    seed: u64,
    opt: &mut Adam,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    let opts = RenderOptions::default();
    for step in 0..tcfg.max_steps {
        let t0 = std::time::Instant::now();
        let batch = draw_batch(set, tcfg, seed, step)?;
        let results: Vec<Result<SampleResult>> = batch
            .par_iter()
            .map(|spec| {
                let frames = &set.sequences[spec.seq];
                let source = &frames[spec.source];
                let driving = &frames[spec.driving];
                let mut tape = Tape::training();
                let fwd = model.forward_train(
                    &mut tape,
                    &source.image,
                    &spec.alpha_s,
                    &spec.alpha_d,
                    &driving.camera,
                    &opts,
                )?;
                let target = tape.constant3(driving.image.data.clone());
                let (loss, l1, perc) = losses::pretrain_loss_on_tape(&mut tape, tcfg, fwd.pred, target)?;
                let total = tape.scalar(loss);
                let l1v = tape.scalar(l1);
                let percv = tape.scalar(perc);
                let grads = tape.backward(loss);
                Ok(SampleResult { grads: tape.param_grads(&grads), total, l1: l1v, perceptual: percv })
            })
            .collect();

        let mut agg: Option<IndexMap<String, ArrayD<f64>>> = None;
        let mut total = 0.0;
        let mut l1 = 0.0;
        let mut perc = 0.0;
        let inv = 1.0 / tcfg.batch_size as f64;
        for r in results {
            // Divergence usually surfaces as exploded weights tripping the
            // attribute validators rather than as a literal NaN loss.
            let r = r.map_err(|e| match e {
                Error::NonFinite(d) => Error::Diverged { step, detail: format!("non-finite {d}") },
                other => other,
            })?;
            total += r.total * inv;
            l1 += r.l1 * inv;
            perc += r.perceptual * inv;
            match &mut agg {
                None => {
                    let mut g = r.grads;
                    for arr in g.values_mut() {
                        arr.mapv_inplace(|v| v * inv);
                    }
                    agg = Some(g);
                }
                Some(acc) => {
                    for (k, g) in r.grads {
                        *acc.get_mut(&k).expect("same key set per sample") += &g.mapv(|v| v * inv);
                    }
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss = {total}") });
        }
        let mut grads = agg.unwrap();
        clip_global_norm(&mut grads, tcfg.grad_clip);
        opt.step(&mut model.store, &grads)?;
        log.rows.push(LogRow {
            step,
            total,
            l1,
            perceptual: perc,
            region: 0.0,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

/// Loss of the current model on the step-0 batch, without updating anything.
pub fn initial_loss(model: &Model, set: &TrainSet, tcfg: &TrainConfig, seed: u64) -> Result<f64> {
    let batch = draw_batch(set, tcfg, seed, 0)?;
    let opts = RenderOptions::default();
    let mut total = 0.0;
    for spec in &batch {
        let frames = &set.sequences[spec.seq];
        let mut tape = Tape::inference();
        let fwd = model.forward_train(
            &mut tape,
            &frames[spec.source].image,
            &spec.alpha_s,
            &spec.alpha_d,
            &frames[spec.driving].camera,
            &opts,
        )?;
        let target = tape.constant3(frames[spec.driving].image.data.clone());
        let (loss, _, _) = losses::pretrain_loss_on_tape(&mut tape, tcfg, fwd.pred, target)?;
        total += tape.scalar(loss) / tcfg.batch_size as f64;
    }
    Ok(total)
}

// ---- restoration set (stage-2 data) ----

/// One stage-2 training pair: a frozen-stage-1 raw render driven by a foreign
/// motion, the analytic ground-truth image of the same identity under that
/// motion (the 2D-teacher), and the driving landmarks.
pub struct RestorationPair {
    pub input: Image,
    pub target: Image,
    pub landmarks: Array2<f64>,
    pub avatar: usize,
}

pub struct RestorationSet {
    pub avatars: Vec<AvatarState>,
    pub pairs: Vec<RestorationPair>,
}

/// Builds the stage-2 set from a frozen stage-1 model. Deterministic given
/// seeds and the checkpoint.
pub fn make_restoration_set(
    model: &Model,
    dcfg: &DatasetConfig,
    rcfg: &RestorationSetConfig,
    identity_seeds: &[u64],
    seed: u64,
    checkpoint_hash: [u8; 32],
) -> Result<RestorationSet> {
    if identity_seeds.len() < rcfg.identities {
        return Err(Error::InvalidConfig(format!(
            "need {} identity seeds, got {}",
            rcfg.identities,
            identity_seeds.len()
        )));
    }
    let mut avatars = Vec::new();
    let mut pairs = Vec::new();
    for (ai, &id_seed) in identity_seeds.iter().take(rcfg.identities).enumerate() {
        let id = synth::IdentitySpec::from_seed(id_seed);
        // Source frame: the first frame of this identity's own sequence.
        let own = synth::generate_sequence(dcfg, id_seed, seed, 1)?;
        let source = &own[0];
        let mut rng = substream_indexed(seed, "restoration/source", id_seed);
        let alpha_s = synth::extract_condition(source, 0.0, &mut rng);
        let avatar = model.build_avatar(&source.image, &alpha_s, checkpoint_hash)?;

        for d in 0..rcfg.drivers_per_identity {
            // Driver motion comes from a foreign seed-derived track.
            let driver_seed = substream_indexed(seed, "restoration/driver", (ai * 1000 + d) as u64)
                .gen::<u64>();
            let track = synth::generate_sequence(dcfg, driver_seed, seed, rcfg.frames_per_driver)?;
            for f in &track {
                // Target: this identity rendered analytically under the
                // driver's control vector and camera.
                let target = synth::render_face(dcfg, &id, &f.alpha, &f.camera);
                let landmarks = synth::landmarks_for(dcfg, &id, &f.alpha, &f.camera);
                let input = model.reenact_with(
                    &avatar,
                    &f.alpha,
                    &f.camera,
                    &crate::model::ReenactSettings { no_restore: true, parallel: false },
                )?;
                pairs.push(RestorationPair { input, target, landmarks, avatar: ai });
            }
        }
        avatars.push(avatar.state);
    }
    Ok(RestorationSet { avatars, pairs })
}

/// Stage-2 finetune: restorer-only updates on the restoration set. Every
/// non-restorer weight stays bit-identical; the optimizer state contains only
/// restorer entries.
pub fn finetune(model: &mut Model, set: &RestorationSet, tcfg: &TrainConfig, seed: u64) -> Result<(TrainLog, Adam)> {
    if set.pairs.is_empty() {
        return Err(Error::InvalidConfig("empty restoration set".into()));
    }
    let mut opt = Adam::new(tcfg);
    let mut log = TrainLog::default();
    for step in 0..tcfg.max_steps {
        let t0 = std::time::Instant::now();
        let mut rng = substream_indexed(seed, "finetune/step", step);
        let picks: Vec<usize> = (0..tcfg.batch_size).map(|_| rng.gen_range(0..set.pairs.len())).collect();
        let results: Vec<Result<(IndexMap<String, ArrayD<f64>>, f64, f64, f64, f64)>> = picks
            .par_iter()
            .map(|&pi| {
                let pair = &set.pairs[pi];
                let mut tape = Tape::training();
                let raw = tape.constant3(pair.input.data.clone());
                let cond = tape.constant3(set.avatars[pair.avatar].restore_features.clone());
                let pred = crate::restore::refine(&mut tape, &model.store, &model.cfg, raw, cond)?;
                let target = tape.constant3(pair.target.data.clone());
                let (loss, l1, perc, region) =
                    losses::finetune_loss_on_tape(&mut tape, tcfg, pred, target, &pair.landmarks)?;
                let vals = (tape.scalar(loss), tape.scalar(l1), tape.scalar(perc), tape.scalar(region));
                let grads = tape.backward(loss);
                Ok((tape.param_grads(&grads), vals.0, vals.1, vals.2, vals.3))
            })
            .collect();

        let inv = 1.0 / tcfg.batch_size as f64;
        let mut agg: Option<IndexMap<String, ArrayD<f64>>> = None;
        let (mut total, mut l1, mut perc, mut region) = (0.0, 0.0, 0.0, 0.0);
        for r in results {
            let (g, t, a, p, rg) = r?;
            total += t * inv;
            l1 += a * inv;
            perc += p * inv;
            region += rg * inv;
            match &mut agg {
                None => {
                    let mut g = g;
                    for arr in g.values_mut() {
                        arr.mapv_inplace(|v| v * inv);
                    }
                    agg = Some(g);
                }
                Some(acc) => {
                    for (k, gv) in g {
                        *acc.get_mut(&k).expect("same key set") += &gv.mapv(|v| v * inv);
                    }
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss = {total}") });
        }
        let mut grads = agg.unwrap();
        debug_assert!(grads.keys().all(|k| k.starts_with("restore.")));
        clip_global_norm(&mut grads, tcfg.grad_clip);
        opt.step(&mut model.store, &grads)?;
        log.rows.push(LogRow {
            step,
            total,
            l1,
            perceptual: perc,
            region,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((log, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackboneConfig;

    fn micro_model_cfg() -> ModelConfig {
        ModelConfig {
            resolution: 16,
            backbone: BackboneConfig {
                width: 12,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                tap_layers: vec![0],
                tap_channels: 4,
                fused_channels: 8,
                patch: 8,
            },
            mesh: crate::config::MeshConfig { vertex_count: 24, ..Default::default() },
            canon_blocks: 1,
            canon_heads: 2,
            canon_ctx_tokens: 2,
            static_hidden: 10,
            vertex_embed: 4,
            dyn_grid: 4,
            dyn_channels: 6,
            reenact_hidden: 8,
            reenact_channels: 4,
            restore_channels: 4,
            restore_blocks: 3,
            ..Default::default()
        }
    }

    fn micro_dataset_cfg() -> DatasetConfig {
        DatasetConfig {
            frames_per_identity: 12,
            resolution: 16,
            focal: 21.5,
            ..Default::default()
        }
    }

    fn micro_train_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_steps: steps,
            subsample_interval: 2,
            learning_rate: 3e-4,
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_container_roundtrips_bit_exactly() {
        let model = Model::init(micro_model_cfg(), 3).unwrap();
        let ck = Checkpoint::capture(&model, 17, None);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(ck, back);
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let model = Model::init(micro_model_cfg(), 3).unwrap();
        let ck = Checkpoint::capture(&model, 1, None);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf[0] ^= 0xff;
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
        let mut truncated = Vec::new();
        ck.write_to(&mut truncated).unwrap();
        truncated.truncate(truncated.len() / 2);
        assert!(Checkpoint::read_from(&mut truncated.as_slice()).is_err());
    }

    #[test]
    fn short_pretrain_decreases_loss_and_is_deterministic() {
        let dcfg = micro_dataset_cfg();
        let tcfg = micro_train_cfg(8);
        let run = || {
            let mut model = Model::init(micro_model_cfg(), 11).unwrap();
            let set = TrainSet::generate(&dcfg, &tcfg, 21, &[1001]).unwrap();
            let log = pretrain(&mut model, &set, &tcfg, 21).unwrap();
            log.rows.iter().map(|r| r.total).collect::<Vec<f64>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical seeds must give identical loss trajectories");
        assert!(a.last().unwrap() < a.first().unwrap(), "loss should drop: {a:?}");
    }

    #[test]
    fn gradient_clip_rescales_to_unit_norm() {
        let mut grads: IndexMap<String, ArrayD<f64>> = IndexMap::new();
        grads.insert("a".into(), ndarray::arr1(&[3.0, 4.0]).into_dyn()); // norm 5
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let new_norm: f64 = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn finetune_freezes_everything_but_the_restorer() {
        let dcfg = micro_dataset_cfg();
        let model_cfg = micro_model_cfg();
        let model = Model::init(model_cfg, 13).unwrap();
        let stage1 = Checkpoint::capture(&model, 0, None);
        let hash = stage1.content_hash().unwrap();
        let rcfg = RestorationSetConfig { identities: 1, drivers_per_identity: 1, frames_per_driver: 3 };
        let set = make_restoration_set(&model, &dcfg, &rcfg, &[501], 7, hash).unwrap();
        assert_eq!(set.pairs.len(), rcfg.pair_count());
        // Every pair shares camera-consistent target/input sizes and differs
        // before stage 2 (the raw render is not the analytic image).
        for p in &set.pairs {
            assert_eq!(p.input.data.shape(), p.target.data.shape());
            assert!(p.input.l1(&p.target).unwrap() > 1e-4);
        }

        let mut model2 = stage1.to_model().unwrap();
        let tcfg = TrainConfig { max_steps: 3, batch_size: 2, ..TrainConfig::finetune_defaults() };
        let (_log, opt) = finetune(&mut model2, &set, &tcfg, 9).unwrap();
        let stage2 = Checkpoint::capture(&model2, 3, Some(&opt));

        let mut restorer_changed = false;
        for (name, w1) in &stage1.weights {
            let w2 = &stage2.weights[name];
            if name.starts_with("restore.") {
                restorer_changed |= w1 != w2;
            } else {
                assert_eq!(w1, w2, "frozen block {name} changed");
            }
        }
        assert!(restorer_changed, "restorer must actually train");
        assert!(stage2.opt_m.keys().all(|k| k.starts_with("restore.")));
        assert!(!stage2.opt_m.is_empty());
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let dcfg = micro_dataset_cfg();
        let tcfg = TrainConfig { learning_rate: f64::NAN, max_steps: 2, batch_size: 1, ..micro_train_cfg(2) };
        let mut model = Model::init(micro_model_cfg(), 11).unwrap();
        let set = TrainSet::generate(&dcfg, &tcfg, 5, &[77]).unwrap();
        // A NaN learning rate poisons the weights after step 0; step 1's loss
        // is then non-finite and training must abort.
        let err = pretrain(&mut model, &set, &tcfg, 5);
        assert!(matches!(err, Err(Error::Diverged { .. })));
    }
}
