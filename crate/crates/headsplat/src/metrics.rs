//! Evaluation: image quality (PSNR, SSIM, perceptual, L1), landmark accuracy
//! (FLMD/MLMD via normalized cross-correlation template matching against the
//! analytic world's own templates), and similarity proxies (identity cosine
//! from the fixed feature stack; pose/expression cosines from a small frozen
//! condition estimator shipped as a fixture).
//!
//! The landmark detector must pass a self-test (<= 0.5 px on ground-truth
//! images) before any report is emitted; otherwise the report is refused.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::config::{AlphaLayout, DatasetConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::losses::MOUTH_LM;
use crate::lpips;
use crate::model::{Model, ReenactSettings};
use crate::synth::{self, Frame};
use crate::tape::Tape;
use crate::weights::{self, tape_param, WeightStore};

// ---- scalar image metrics ----

/// PSNR in dB, or `Identical` when the MSE is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(*v),
            Psnr::Identical => None,
        }
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::shape("psnr needs equal shapes"));
    }
    let n = a.data.len() as f64;
    Ok(a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn psnr(a: &Image, b: &Image) -> Result<Psnr> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(10.0 * (1.0 / m).log10()))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1,
/// valid-region windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::shape("ssim needs equal shapes"));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("image smaller than the SSIM window"));
    }
    let half = SSIM_WINDOW / 2;
    let mut kernel = [0.0f64; SSIM_WINDOW];
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - half as f64;
        *k = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let ksum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= ksum;
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for ci in half..h - half {
            for cj in half..w - half {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for di in 0..SSIM_WINDOW {
                    for dj in 0..SSIM_WINDOW {
                        let wgt = kernel[di] * kernel[dj];
                        let x = a.data[[ci + di - half, cj + dj - half, ch]];
                        let y = b.data[[ci + di - half, cj + dj - half, ch]];
                        ma += wgt * x;
                        mb += wgt * y;
                        va += wgt * x * x;
                        vb += wgt * y * y;
                        cov += wgt * x * y;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                acc += s;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / 3.0)
}

// ---- landmark detector ----

const TEMPLATE_HALF: usize = 4;
const SEARCH_RADIUS: isize = 6;
pub const DETECTOR_SELF_TOL: f64 = 0.5;

fn luminance(img: &Image, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y as usize >= img.height() || x as usize >= img.width() {
        return 0.0;
    }
    let (y, x) = (y as usize, x as usize);
    0.299 * img.data[[y, x, 0]] + 0.587 * img.data[[y, x, 1]] + 0.114 * img.data[[y, x, 2]]
}

/// Finds each reference landmark in `rendered` by maximizing the normalized
/// cross-correlation of a template cut from `reference` around the ground
/// truth position. Returns LANDMARKS x 2 detected pixel positions.
pub fn detect_landmarks(rendered: &Image, reference: &Image, gt: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((gt.nrows(), 2));
    let th = TEMPLATE_HALF as isize;
    for k in 0..gt.nrows() {
        let cx = gt[[k, 0]].round() as isize;
        let cy = gt[[k, 1]].round() as isize;
        // Template statistics from the reference image.
        let mut tvals = Vec::with_capacity((2 * TEMPLATE_HALF + 1).pow(2));
        for dy in -th..=th {
            for dx in -th..=th {
                tvals.push(luminance(reference, cy + dy, cx + dx));
            }
        }
        let tmean = tvals.iter().sum::<f64>() / tvals.len() as f64;
        let tnorm: f64 = tvals.iter().map(|v| (v - tmean) * (v - tmean)).sum::<f64>().sqrt();

        let mut best = (f64::NEG_INFINITY, cx, cy);
        for sy in -SEARCH_RADIUS..=SEARCH_RADIUS {
            for sx in -SEARCH_RADIUS..=SEARCH_RADIUS {
                let (ox, oy) = (cx + sx, cy + sy);
                let mut rvals = Vec::with_capacity(tvals.len());
                for dy in -th..=th {
                    for dx in -th..=th {
                        rvals.push(luminance(rendered, oy + dy, ox + dx));
                    }
                }
                let rmean = rvals.iter().sum::<f64>() / rvals.len() as f64;
                let rnorm: f64 = rvals.iter().map(|v| (v - rmean) * (v - rmean)).sum::<f64>().sqrt();
                if tnorm < 1e-9 || rnorm < 1e-9 {
                    continue;
                }
                let ncc: f64 = tvals
                    .iter()
                    .zip(rvals.iter())
                    .map(|(t, r)| (t - tmean) * (r - rmean))
                    .sum::<f64>()
                    / (tnorm * rnorm);
                // Deterministic tie-break: strictly better wins, ties keep the
                // earlier (smaller offset) candidate ordering.
                if ncc > best.0 {
                    best = (ncc, ox, oy);
                }
            }
        }
        out[[k, 0]] = best.1 as f64;
        out[[k, 1]] = best.2 as f64;
    }
    out
}

/// (FLMD, MLMD): mean pixel distance of detected landmarks to the driving
/// ground truth, over all landmarks and over the mouth subset.
pub fn landmark_distances(detected: &Array2<f64>, gt: &Array2<f64>) -> (f64, f64) {
    let dist = |k: usize| {
        let dx = detected[[k, 0]] - gt[[k, 0]];
        let dy = detected[[k, 1]] - gt[[k, 1]];
        (dx * dx + dy * dy).sqrt()
    };
    let flmd = (0..gt.nrows()).map(dist).sum::<f64>() / gt.nrows() as f64;
    let mlmd = MOUTH_LM.iter().map(|&k| dist(k)).sum::<f64>() / MOUTH_LM.len() as f64;
    (flmd, mlmd)
}

/// Detector calibration gate: on the ground-truth image itself, the detector
/// must localize every landmark within [`DETECTOR_SELF_TOL`] pixels. The GT
/// positions are rounded to the detector's integer grid first, because the
/// detector reports integer peaks.
pub fn detector_self_test(frame: &Frame) -> Result<f64> {
    let det = detect_landmarks(&frame.image, &frame.image, &frame.landmarks);
    let rounded = frame.landmarks.mapv(|v| v.round());
    let (flmd, _) = landmark_distances(&det, &rounded);
    if flmd > DETECTOR_SELF_TOL {
        return Err(Error::DetectorCalibration(format!(
            "self-test FLMD {flmd} px exceeds {DETECTOR_SELF_TOL}"
        )));
    }
    Ok(flmd)
}

/// FLMD/MLMD of a rendered frame against its driving frame.
pub fn landmark_metrics(rendered: &Image, driving: &Frame) -> Result<(f64, f64)> {
    detector_self_test(driving)?;
    let det = detect_landmarks(rendered, &driving.image, &driving.landmarks);
    Ok(landmark_distances(&det, &driving.landmarks))
}

// ---- similarity proxies ----

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Identity similarity proxy: cosine of the fixed random-conv embeddings.
pub fn csim_proxy(a: &Image, b: &Image) -> f64 {
    cosine(&lpips::identity_embedding(a), &lpips::identity_embedding(b))
}

/// (APC, AEC) between two full control vectors: pose cosine and
/// eye∥mouth∥expression cosine.
pub fn subvector_cosines(layout: &AlphaLayout, a: &Array1<f64>, b: &Array1<f64>) -> (f64, f64) {
    let pr = layout.pose_range();
    let apc = cosine(
        &a.as_slice().unwrap()[pr.clone()],
        &b.as_slice().unwrap()[pr],
    );
    let d = layout.drive_dims();
    let aec = cosine(&a.as_slice().unwrap()[..d], &b.as_slice().unwrap()[..d]);
    (apc, aec)
}

// ---- condition estimator (test fixture) ----

/// A small frozen convnet that re-estimates the control vector from a rendered
/// frame. Trained once on the synthetic world, shipped as a fixture, and used
/// only to compute the APC/AEC proxies.
pub struct AlphaEstimator {
    pub store: WeightStore,
    pub resolution: usize,
    pub alpha_total: usize,
}

pub const ESTIMATOR_MAGIC: &[u8; 8] = b"GHESTM1\0";
const EST_CH: [usize; 4] = [3, 12, 24, 32];
const EST_HIDDEN: usize = 48;

impl AlphaEstimator {
    pub fn init(seed: u64, resolution: usize, alpha_total: usize) -> AlphaEstimator {
        let mut store = WeightStore::new();
        for s in 0..EST_CH.len() - 1 {
            weights::init_conv(&mut store, seed, &format!("est.conv{s}.w"), EST_CH[s + 1], EST_CH[s], 3);
            weights::init_zeros1(&mut store, &format!("est.conv{s}.b"), EST_CH[s + 1]);
        }
        let g = resolution >> (EST_CH.len() - 1);
        let flat = EST_CH[EST_CH.len() - 1] * g * g;
        weights::init_linear(&mut store, seed, "est.fc1.w", flat, EST_HIDDEN);
        weights::init_zeros1(&mut store, "est.fc1.b", EST_HIDDEN);
        weights::init_linear(&mut store, seed, "est.fc2.w", EST_HIDDEN, alpha_total);
        weights::init_zeros1(&mut store, "est.fc2.b", alpha_total);
        AlphaEstimator { store, resolution, alpha_total }
    }

    fn forward(&self, tape: &mut Tape, img: &Image) -> crate::tape::Var {
        let x = tape.constant3(img.data.clone());
        let mut x = tape.hwc_to_chw(x);
        for s in 0..EST_CH.len() - 1 {
            let w = tape_param(tape, &self.store, &format!("est.conv{s}.w"));
            let b = tape_param(tape, &self.store, &format!("est.conv{s}.b"));
            x = tape.conv2d(x, w, b, 3, 2, 1);
            x = tape.gelu(x);
        }
        let g = self.resolution >> (EST_CH.len() - 1);
        let flat = EST_CH[EST_CH.len() - 1] * g * g;
        let x = tape.reshape(x, &[1, flat]);
        let x = crate::backbone::linear(tape, &self.store, x, "est.fc1");
        let x = tape.gelu(x);
        let x = crate::backbone::linear(tape, &self.store, x, "est.fc2");
        tape.reshape(x, &[self.alpha_total])
    }

    pub fn estimate(&self, img: &Image) -> Array1<f64> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, img);
        tape.val(out).clone().into_dimensionality().unwrap()
    }

    /// Supervised regression on synthetic frames; used once to produce the
    /// committed fixture.
    pub fn train(
        cfg: &DatasetConfig,
        identity_seeds: &[u64],
        frames_per_identity: usize,
        steps: u64,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<AlphaEstimator> {
        let mut est = AlphaEstimator::init(seed, cfg.resolution, AlphaLayout::default().total());
        let mut frames = Vec::new();
        for &id in identity_seeds {
            frames.extend(synth::generate_sequence(cfg, id, seed, frames_per_identity)?);
        }
        let mut opt = crate::train::Adam::new(&TrainConfig { learning_rate: lr, ..Default::default() });
        for step in 0..steps {
            let mut rng = crate::rng::substream_indexed(seed, "estimator/step", step);
            let mut agg: Option<indexmap::IndexMap<String, ndarray::ArrayD<f64>>> = None;
            let mut total = 0.0;
            for _ in 0..batch {
                let f = &frames[rand::Rng::gen_range(&mut rng, 0..frames.len())];
                let mut tape = Tape::training();
                let pred = est.forward(&mut tape, &f.image);
                let target = tape.constant1(f.alpha.clone());
                let diff = tape.sub(pred, target);
                let sq = tape.square(diff);
                let loss = tape.mean_all(sq);
                total += tape.scalar(loss) / batch as f64;
                let grads = tape.backward(loss);
                let named = tape.param_grads(&grads);
                match &mut agg {
                    None => {
                        let mut g = named;
                        for a in g.values_mut() {
                            a.mapv_inplace(|v| v / batch as f64);
                        }
                        agg = Some(g);
                    }
                    Some(acc) => {
                        for (k, g) in named {
                            *acc.get_mut(&k).unwrap() += &g.mapv(|v| v / batch as f64);
                        }
                    }
                }
            }
            if !total.is_finite() {
                return Err(Error::Diverged { step, detail: format!("estimator loss {total}") });
            }
            let mut grads = agg.unwrap();
            crate::train::clip_global_norm(&mut grads, 1.0);
            opt.step(&mut est.store, &grads)?;
        }
        Ok(est)
    }

    pub fn write_to(&self, w: &mut impl std::io::Write) -> Result<()> {
        w.write_all(ESTIMATOR_MAGIC)?;
        w.write_all(&(self.resolution as u32).to_le_bytes())?;
        w.write_all(&(self.alpha_total as u32).to_le_bytes())?;
        w.write_all(&(self.store.len() as u64).to_le_bytes())?;
        for (name, arr) in self.store.iter() {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[arr.ndim() as u8])?;
            for d in arr.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            crate::gauss::write_f32_block(w, arr.as_slice().unwrap())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl std::io::Read) -> Result<AlphaEstimator> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ESTIMATOR_MAGIC {
            return Err(Error::format("bad estimator magic"));
        }
        let mut u4 = [0u8; 4];
        r.read_exact(&mut u4)?;
        let resolution = u32::from_le_bytes(u4) as usize;
        r.read_exact(&mut u4)?;
        let alpha_total = u32::from_le_bytes(u4) as usize;
        if resolution == 0 || resolution > 4096 || alpha_total == 0 || alpha_total > 4096 {
            return Err(Error::format("implausible estimator header"));
        }
        let mut u8b = [0u8; 8];
        r.read_exact(&mut u8b)?;
        let count = u64::from_le_bytes(u8b) as usize;
        if count > 1000 {
            return Err(Error::format("implausible estimator block count"));
        }
        let mut store = WeightStore::new();
        for _ in 0..count {
            let mut u2 = [0u8; 2];
            r.read_exact(&mut u2)?;
            let nlen = u16::from_le_bytes(u2) as usize;
            let mut nb = vec![0u8; nlen];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb).map_err(|e| Error::format(e.to_string()))?;
            let mut nd = [0u8; 1];
            r.read_exact(&mut nd)?;
            let mut dims = Vec::new();
            for _ in 0..nd[0] {
                r.read_exact(&mut u4)?;
                dims.push(u32::from_le_bytes(u4) as usize);
            }
            let len: usize = dims.iter().product();
            if len > 10_000_000 {
                return Err(Error::format("implausible estimator block"));
            }
            let data = crate::gauss::read_f32_vec(r, len)?;
            let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
                .map_err(|e| Error::shape(e.to_string()))?;
            store.insert(name, arr);
        }
        Ok(AlphaEstimator { store, resolution, alpha_total })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::cli::write_atomic(path, &buf)
    }

    pub fn load(path: &std::path::Path) -> Result<AlphaEstimator> {
        let bytes = std::fs::read(path)?;
        AlphaEstimator::read_from(&mut bytes.as_slice())
    }

    /// The committed fixture, embedded so tests and the CLI agree on weights.
    pub fn fixture() -> Result<AlphaEstimator> {
        static BYTES: &[u8] = include_bytes!("../fixtures/alpha_estimator.bin");
        AlphaEstimator::read_from(&mut &BYTES[..])
    }
}

// ---- protocols ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Protocol {
    SelfReenactment,
    CrossReenactment,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    /// True when prediction and ground truth are bit-identical (PSNR infinite).
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub identical: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flmd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlmd: Option<f64>,
    pub csim: f64,
    pub apc: f64,
    pub aec: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub frames: Vec<FrameMetrics>,
    pub detector_self_error: f64,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_perceptual: Option<f64>,
    pub mean_l1: Option<f64>,
    pub mean_flmd: Option<f64>,
    pub mean_mlmd: Option<f64>,
    pub mean_csim: f64,
    pub mean_apc: f64,
    pub mean_aec: f64,
}

fn mean_of(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl EvalReport {
    fn summarize(protocol: Protocol, detector_self_error: f64, frames: Vec<FrameMetrics>) -> EvalReport {
        let mean_psnr_db = mean_of(frames.iter().map(|f| f.psnr_db));
        let mean_ssim = mean_of(frames.iter().map(|f| f.ssim));
        let mean_perceptual = mean_of(frames.iter().map(|f| f.perceptual));
        let mean_l1 = mean_of(frames.iter().map(|f| f.l1));
        let mean_flmd = mean_of(frames.iter().map(|f| f.flmd));
        let mean_mlmd = mean_of(frames.iter().map(|f| f.mlmd));
        let n = frames.len().max(1) as f64;
        let mean_csim = frames.iter().map(|f| f.csim).sum::<f64>() / n;
        let mean_apc = frames.iter().map(|f| f.apc).sum::<f64>() / n;
        let mean_aec = frames.iter().map(|f| f.aec).sum::<f64>() / n;
        EvalReport {
            protocol,
            frames,
            detector_self_error,
            mean_psnr_db,
            mean_ssim,
            mean_perceptual,
            mean_l1,
            mean_flmd,
            mean_mlmd,
            mean_csim,
            mean_apc,
            mean_aec,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr_db,identical,ssim,perceptual,l1,flmd,mlmd,csim,apc,aec\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for f in &self.frames {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                f.frame,
                opt(f.psnr_db),
                f.identical,
                opt(f.ssim),
                opt(f.perceptual),
                opt(f.l1),
                opt(f.flmd),
                opt(f.mlmd),
                f.csim,
                f.apc,
                f.aec
            ));
        }
        s
    }
}

/// Options for the evaluation protocols.
pub struct EvalOptions {
    pub frame_stride: usize,
    pub no_restore: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { frame_stride: 5, no_restore: false }
    }
}

/// Runs one protocol over held-out sequences.
///
/// Self-reenactment: the avatar comes from frame 0 of each sequence and is
/// driven by the later frames, which double as ground truth. Cross: the
/// avatar of `sequences[0]` is driven by the other identities' frames, and
/// only the reference-free proxies (csim/apc/aec) are reported.
pub fn run_protocol(
    model: &Model,
    sequences: &[Vec<Frame>],
    protocol: Protocol,
    estimator: &AlphaEstimator,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if sequences.is_empty() || sequences.iter().any(|s| s.len() < 2) {
        return Err(Error::InvalidConfig("protocols need sequences of >= 2 frames".into()));
    }
    // Calibration gate.
    let detector_self_error = detector_self_test(&sequences[0][0])?;
    let layout = model.cfg.alpha;
    let settings = ReenactSettings { no_restore: opts.no_restore, parallel: false };
    let mut frames_out = Vec::new();
    match protocol {
        Protocol::SelfReenactment => {
            for seq in sequences {
                let source = &seq[0];
                let avatar = model.build_avatar(&source.image, &source.alpha, [0; 32])?;
                for f in seq.iter().skip(1).step_by(opts.frame_stride.max(1)) {
                    let rendered = model.reenact_with(&avatar, &f.alpha, &f.camera, &settings)?;
                    frames_out.push(frame_metrics_self(model, estimator, &layout, &rendered, source, f)?);
                }
            }
        }
        Protocol::CrossReenactment => {
            let source = &sequences[0][0];
            let avatar = model.build_avatar(&source.image, &source.alpha, [0; 32])?;
            for seq in &sequences[1..] {
                for f in seq.iter().step_by(opts.frame_stride.max(1)) {
                    let rendered = model.reenact_with(&avatar, &f.alpha, &f.camera, &settings)?;
                    let est = estimator.estimate(&rendered);
                    let (apc, aec) = subvector_cosines(&layout, &est, &f.alpha);
                    frames_out.push(FrameMetrics {
                        frame: f.index,
                        psnr_db: None,
                        identical: false,
                        ssim: None,
                        perceptual: None,
                        l1: None,
                        flmd: None,
                        mlmd: None,
                        csim: csim_proxy(&rendered, &source.image),
                        apc,
                        aec,
                    });
                }
            }
        }
    }
    Ok(EvalReport::summarize(protocol, detector_self_error, frames_out))
}

fn frame_metrics_self(
    _model: &Model,
    estimator: &AlphaEstimator,
    layout: &AlphaLayout,
    rendered: &Image,
    source: &Frame,
    driving: &Frame,
) -> Result<FrameMetrics> {
    let p = psnr(rendered, &driving.image)?;
    let det = detect_landmarks(rendered, &driving.image, &driving.landmarks);
    let (flmd, mlmd) = landmark_distances(&det, &driving.landmarks);
    let est = estimator.estimate(rendered);
    let (apc, aec) = subvector_cosines(layout, &est, &driving.alpha);
    Ok(FrameMetrics {
        frame: driving.index,
        psnr_db: p.db(),
        identical: p == Psnr::Identical,
        ssim: Some(ssim(rendered, &driving.image)?),
        perceptual: Some(lpips::perceptual_distance(rendered, &driving.image)?),
        l1: Some(rendered.l1(&driving.image)?),
        flmd: Some(flmd),
        mlmd: Some(mlmd),
        csim: csim_proxy(rendered, &source.image),
        apc,
        aec,
    })
}

/// Convenience wrapper used where only image-quality metrics matter.
pub fn quality_only(rendered: &Image, target: &Image) -> Result<(Psnr, f64, f64)> {
    Ok((psnr(rendered, target)?, ssim(rendered, target)?, rendered.l1(target)?))
}

#[cfg(test)]
pub(crate) use tests::tiny_dataset_cfg;
