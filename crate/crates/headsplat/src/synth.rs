//! The synthetic face world: an analytic, ray-traced toy head that supplies
//! images together with exact control vectors, landmarks, and cameras.
//!
//! The face is painted on an ellipsoid in canonical pose; rigid head pose is
//! entirely a camera orbit, so geometry is exact by construction. Every
//! control dimension has a visible effect (the condition estimator fixture
//! must be able to recover all of them), and the sub-blocks are strictly
//! local: eye dims repaint only the eye apertures, mouth dims only the mouth
//! region, expression dims only brows/cheeks/nose. Ground truth is rendered
//! analytically, never through the Gaussian pipeline under test.

use ndarray::{Array1, Array2};
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;

use crate::camera::{camera_from_pose, Camera};
use crate::config::{AlphaLayout, DatasetConfig};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::rng::{normal, substream, substream_indexed};

pub const LANDMARKS: usize = 10;

/// Seed-derived identity: colors and face-part geometry of one toy person.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub seed: u64,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lip: [f64; 3],
    pub eye_u: f64,
    pub eye_v: f64,
    pub eye_rx: f64,
    pub eye_ry: f64,
    pub mouth_v: f64,
    pub mouth_w: f64,
    pub tooth_freq: f64,
    pub hair_line: f64,
    pub brow_gap: f64,
    pub nose_size: f64,
}

impl IdentitySpec {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = substream(seed, "identity");
        let mut u = || rng.gen::<f64>();
        let base = 0.55 + 0.25 * u();
        Self {
            seed,
            skin: [base + 0.06, base - 0.08 * u(), base - 0.16 - 0.06 * u()],
            hair: [0.06 + 0.22 * u(), 0.05 + 0.16 * u(), 0.04 + 0.12 * u()],
            iris: [0.10 + 0.4 * u(), 0.15 + 0.45 * u(), 0.20 + 0.5 * u()],
            lip: [0.52 + 0.16 * u(), 0.16 + 0.10 * u(), 0.18 + 0.08 * u()],
            eye_u: 0.26 + 0.08 * u(),
            eye_v: 0.28,
            eye_rx: 0.10 + 0.04 * u(),
            eye_ry: 0.065 + 0.02 * u(),
            mouth_v: -0.45,
            mouth_w: 0.28 + 0.08 * u(),
            tooth_freq: (4.0 + 3.0 * u()).round(),
            hair_line: 0.58 + 0.08 * u(),
            brow_gap: 0.13 + 0.03 * u(),
            nose_size: 0.8 + 0.4 * u(),
        }
    }
}

/// One sample of the world.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: Image,
    /// Ground-truth control vector, all entries in [-1, 1].
    pub alpha: Array1<f64>,
    /// LANDMARKS x 2 pixel coordinates (x, y).
    pub landmarks: Array2<f64>,
    pub camera: Camera,
    pub identity: u64,
    pub index: usize,
}

// ---- control semantics ----

/// Expanded drawing parameters for one control vector.
struct Controls {
    open_l: f64,
    open_r: f64,
    gaze_x: f64,
    gaze_y: f64,
    mouth_open: f64,
    mouth_width: f64,
    smile: f64,
    lower_drop: f64,
    upper_raise: f64,
    corner_l: f64,
    corner_r: f64,
    teeth_vis: f64,
    brow_raise_l: f64,
    brow_raise_r: f64,
    brow_tilt_l: f64,
    brow_tilt_r: f64,
    brow_thick: f64,
    blush_l: f64,
    blush_r: f64,
    nose_scale: f64,
}

fn controls(layout: &AlphaLayout, alpha: &Array1<f64>) -> Controls {
    let e = layout.eye_range().start;
    let m = layout.mouth_range().start;
    let x = layout.expression_range().start;
    let half = |v: f64| 0.5 * (1.0 + v.clamp(-1.0, 1.0));
    Controls {
        open_l: half(alpha[e]),
        open_r: half(alpha[e + 1]),
        gaze_x: alpha[e + 2].clamp(-1.0, 1.0),
        gaze_y: alpha[e + 3].clamp(-1.0, 1.0),
        mouth_open: half(alpha[m]),
        mouth_width: 1.0 + 0.25 * alpha[m + 1].clamp(-1.0, 1.0),
        smile: alpha[m + 2].clamp(-1.0, 1.0),
        lower_drop: alpha[m + 3].clamp(-1.0, 1.0),
        upper_raise: alpha[m + 4].clamp(-1.0, 1.0),
        corner_l: 0.03 * alpha[m + 5].clamp(-1.0, 1.0),
        corner_r: 0.03 * alpha[m + 6].clamp(-1.0, 1.0),
        teeth_vis: 0.35 + 0.65 * half(alpha[m + 7]),
        brow_raise_l: 0.05 * alpha[x].clamp(-1.0, 1.0),
        brow_raise_r: 0.05 * alpha[x + 1].clamp(-1.0, 1.0),
        brow_tilt_l: 0.25 * alpha[x + 2].clamp(-1.0, 1.0),
        brow_tilt_r: 0.25 * alpha[x + 3].clamp(-1.0, 1.0),
        brow_thick: 1.0 + 0.35 * alpha[x + 4].clamp(-1.0, 1.0),
        blush_l: half(alpha[x + 5]),
        blush_r: half(alpha[x + 6]),
        nose_scale: 1.0 + 0.25 * alpha[x + 7].clamp(-1.0, 1.0),
    }
}

fn smooth(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Coverage of an implicit ellipse q = (du/rx)^2 + (dv/ry)^2 with soft edge.
fn ellipse_cov(du: f64, dv: f64, rx: f64, ry: f64, soft: f64) -> f64 {
    let q = (du / rx) * (du / rx) + (dv / ry) * (dv / ry);
    smooth((1.0 - q) / soft + 0.5)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Mouth midline and interior half-gap at normalized mouth coordinate x̂.
fn mouth_profile(id: &IdentitySpec, c: &Controls, xn: f64) -> (f64, f64) {
    let envelope = (1.0 - xn * xn).max(0.0);
    let corner = if xn < 0.0 { c.corner_l * (-xn) } else { c.corner_r * xn };
    let midline = id.mouth_v + 0.05 * c.smile * xn * xn + corner;
    let gap = 0.16 * c.mouth_open * envelope;
    (midline, gap)
}

/// Paints the face at canonical surface coordinates (u right, v up).
/// `front` is the forward component of the surface normal.
fn paint(id: &IdentitySpec, c: &Controls, u: f64, v: f64, front: f64) -> [f64; 3] {
    let shade = 0.72 + 0.28 * front.max(0.0);
    if front <= 0.03 {
        return [id.hair[0] * shade, id.hair[1] * shade, id.hair[2] * shade];
    }
    let mut col = id.skin;

    // Cheek blush (expression block).
    for (s, amount) in [(-1.0, c.blush_l), (1.0, c.blush_r)] {
        let cov = ellipse_cov(u - s * 0.45, v + 0.12, 0.16, 0.12, 0.8);
        col = mix(col, [0.85, 0.35, 0.35], 0.35 * amount * cov);
    }

    // Nose (expression block scales it).
    let nose_cov = ellipse_cov(u, v - 0.02, 0.055 * c.nose_scale, 0.10 * c.nose_scale, 0.5);
    col = mix(col, [id.skin[0] * 0.78, id.skin[1] * 0.74, id.skin[2] * 0.72], nose_cov);

    // Hair band.
    let hair_cov = smooth((v - id.hair_line) / 0.04 + 0.5);
    col = mix(col, id.hair, hair_cov);

    // Brows.
    for (s, raise, tilt) in [(-1.0, c.brow_raise_l, c.brow_tilt_l), (1.0, c.brow_raise_r, c.brow_tilt_r)] {
        let cu = s * id.eye_u;
        let du = u - cu;
        let bv = id.eye_v + id.brow_gap + raise + tilt * du * s;
        let h = 0.022 * c.brow_thick;
        let cov_v = smooth((h - (v - bv).abs()) / 0.015 + 0.5);
        let cov_u = smooth((id.eye_rx * 1.25 - du.abs()) / 0.03 + 0.5);
        col = mix(col, [id.hair[0] * 0.7, id.hair[1] * 0.7, id.hair[2] * 0.7], cov_v * cov_u);
    }

    // Eyes (eye block only).
    for (s, open) in [(-1.0, c.open_l), (1.0, c.open_r)] {
        let cu = s * id.eye_u;
        let du = u - cu;
        let dv = v - id.eye_v;
        let ry = id.eye_ry * (0.08 + 0.92 * open);
        let aperture = ellipse_cov(du, dv, id.eye_rx, ry.max(1e-4), 0.35);
        if aperture > 0.0 {
            let mut eye = [0.93, 0.93, 0.92];
            let ix = du - c.gaze_x * 0.35 * id.eye_rx;
            let iy = dv - c.gaze_y * 0.25 * id.eye_ry;
            let iris_cov = ellipse_cov(ix, iy, 0.45 * id.eye_rx, 0.45 * id.eye_rx, 0.5);
            eye = mix(eye, id.iris, iris_cov);
            let pupil_cov = ellipse_cov(ix, iy, 0.18 * id.eye_rx, 0.18 * id.eye_rx, 0.6);
            eye = mix(eye, [0.05, 0.05, 0.05], pupil_cov);
            col = mix(col, eye, aperture);
        }
    }

    // Mouth (mouth block only).
    let w = id.mouth_w * c.mouth_width;
    let xn = u / w;
    if xn.abs() <= 1.15 {
        let (midline, gap) = mouth_profile(id, c, xn.clamp(-1.0, 1.0));
        let dv = v - midline;
        let envelope = (1.0 - xn * xn).max(0.0);
        let t_u = (0.030 + 0.012 * c.upper_raise) * (0.25 + 0.75 * envelope) + 0.008;
        let t_l = (0.040 + 0.015 * c.lower_drop) * (0.25 + 0.75 * envelope) + 0.008;
        let edge = 0.012;
        let u_cov = smooth((1.05 - xn.abs()) / 0.12 + 0.5);
        if u_cov > 0.0 {
            // Upper lip band [gap, gap + t_u], lower lip band [-gap - t_l, -gap].
            let upper = smooth((t_u / 2.0 - (dv - gap - t_u / 2.0).abs()) / edge + 0.5);
            let lower = smooth((t_l / 2.0 - (dv + gap + t_l / 2.0).abs()) / edge + 0.5);
            col = mix(col, id.lip, u_cov * upper.max(lower));
            // Interior (visible when open).
            if gap > 1e-4 {
                let interior = smooth((gap - dv.abs()) / edge + 0.5);
                if interior > 0.0 {
                    let mut inside = [0.23, 0.05, 0.07];
                    // Teeth: upper slice of the interior, vertical stripes.
                    let teeth_lo = gap - 2.0 * gap * c.teeth_vis;
                    if gap > 0.015 && dv > teeth_lo {
                        let stripe = ((xn * id.tooth_freq).floor() as i64).rem_euclid(2);
                        inside = if stripe == 0 { [0.95, 0.93, 0.88] } else { [0.78, 0.74, 0.68] };
                    }
                    col = mix(col, inside, u_cov * interior);
                }
            }
        }
    }

    [col[0] * shade, col[1] * shade, col[2] * shade]
}

// ---- geometry ----

/// Ray-ellipsoid intersection; returns surface coordinates (u, v, front).
fn trace(cfg: &DatasetConfig, cam: &Camera, px: f64, py: f64) -> Option<(f64, f64, f64)> {
    let [ax, ay, az] = cfg.geometry.semi_axes;
    // Camera center and ray direction in world space (R^T used as inverse).
    let r = &cam.rotation;
    let t = &cam.translation;
    let origin = [
        -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
        -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
        -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
    ];
    let dc = [(px - cam.principal[0]) / cam.focal, (py - cam.principal[1]) / cam.focal, 1.0];
    let dir = [
        r[0][0] * dc[0] + r[1][0] * dc[1] + r[2][0] * dc[2],
        r[0][1] * dc[0] + r[1][1] * dc[1] + r[2][1] * dc[2],
        r[0][2] * dc[0] + r[1][2] * dc[1] + r[2][2] * dc[2],
    ];
    let so = [origin[0] / ax, origin[1] / ay, origin[2] / az];
    let sd = [dir[0] / ax, dir[1] / ay, dir[2] / az];
    let a = sd[0] * sd[0] + sd[1] * sd[1] + sd[2] * sd[2];
    let b = 2.0 * (so[0] * sd[0] + so[1] * sd[1] + so[2] * sd[2]);
    let c = so[0] * so[0] + so[1] * so[1] + so[2] * so[2] - 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let tt = (-b - disc.sqrt()) / (2.0 * a);
    if tt <= 0.0 {
        return None;
    }
    let p = [origin[0] + tt * dir[0], origin[1] + tt * dir[1], origin[2] + tt * dir[2]];
    Some((p[0] / ax, p[1] / ay, p[2] / az))
}

/// Renders the analytic face for one control vector and camera.
pub fn render_face(cfg: &DatasetConfig, id: &IdentitySpec, alpha: &Array1<f64>, cam: &Camera) -> Image {
    let layout = AlphaLayout::default();
    let c = controls(&layout, alpha);
    let (w, h) = cam.resolution;
    let mut data = ndarray::Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            if let Some((u, v, front)) = trace(cfg, cam, j as f64 + 0.5, i as f64 + 0.5) {
                let col = paint(id, &c, u, v, front);
                data[[i, j, 0]] = col[0].clamp(0.0, 1.0);
                data[[i, j, 1]] = col[1].clamp(0.0, 1.0);
                data[[i, j, 2]] = col[2].clamp(0.0, 1.0);
            }
        }
    }
    Image { data }
}

/// Analytic landmark positions (pixels) for a control vector and camera.
/// Layout: eye outer L, inner L, center L, inner R, outer R, center R,
/// mouth corner L, corner R, mouth center, nose tip.
pub fn landmarks_for(cfg: &DatasetConfig, id: &IdentitySpec, alpha: &Array1<f64>, cam: &Camera) -> Array2<f64> {
    let layout = AlphaLayout::default();
    let c = controls(&layout, alpha);
    let w = id.mouth_w * c.mouth_width;
    let (ml, _) = mouth_profile(id, &c, -1.0);
    let (mr, _) = mouth_profile(id, &c, 1.0);
    let (mc, _) = mouth_profile(id, &c, 0.0);
    let uv = [
        [-id.eye_u - id.eye_rx, id.eye_v],
        [-id.eye_u + id.eye_rx, id.eye_v],
        [-id.eye_u, id.eye_v],
        [id.eye_u - id.eye_rx, id.eye_v],
        [id.eye_u + id.eye_rx, id.eye_v],
        [id.eye_u, id.eye_v],
        [-w, ml],
        [w, mr],
        [0.0, mc],
        [0.0, 0.02],
    ];
    let [ax, ay, az] = cfg.geometry.semi_axes;
    Array2::from_shape_fn((LANDMARKS, 2), |(k, d)| {
        let (u, v) = (uv[k][0], uv[k][1]);
        let z = (1.0 - u * u - v * v).max(0.0).sqrt();
        let (px, py, _) = cam.project([ax * u, ay * v, az * z]);
        if d == 0 {
            px
        } else {
            py
        }
    })
}

/// Camera for a control vector's pose sub-block.
pub fn camera_for_alpha(cfg: &DatasetConfig, alpha: &Array1<f64>) -> Camera {
    let layout = AlphaLayout::default();
    let pose: Vec<f64> = alpha.slice(ndarray::s![layout.pose_range()]).to_vec();
    camera_from_pose(&pose, cfg.resolution, cfg.focal, cfg.camera_distance)
}

// ---- sequence generation ----

/// Generates a smooth sequence: a clamped random walk over all control
/// dimensions. Fully deterministic from (identity seed, motion seed).
pub fn generate_sequence(
    cfg: &DatasetConfig,
    identity_seed: u64,
    motion_seed: u64,
    n_frames: usize,
) -> Result<Vec<Frame>> {
    if n_frames == 0 {
        return Err(Error::InvalidConfig("need at least one frame".into()));
    }
    let id = IdentitySpec::from_seed(identity_seed);
    let layout = AlphaLayout::default();
    let total = layout.total();
    let mut rng = substream_indexed(motion_seed, "motion", identity_seed);
    let mut alpha = Array1::from_shape_fn(total, |_| 0.6 * (rng.gen::<f64>() * 2.0 - 1.0));
    let mut frames = Vec::with_capacity(n_frames);
    for index in 0..n_frames {
        let cam = camera_for_alpha(cfg, &alpha);
        let image = render_face(cfg, &id, &alpha, &cam);
        let landmarks = landmarks_for(cfg, &id, &alpha, &cam);
        for lm in landmarks.rows() {
            if lm[0] < 0.0 || lm[0] >= cfg.resolution as f64 || lm[1] < 0.0 || lm[1] >= cfg.resolution as f64 {
                return Err(Error::format(format!(
                    "landmark {lm:?} outside frame; pose ranges too wide for resolution"
                )));
            }
        }
        frames.push(Frame {
            image,
            alpha: alpha.clone(),
            landmarks,
            camera: cam,
            identity: identity_seed,
            index,
        });
        // Pose drifts slower than expression for stable framing.
        for (k, a) in alpha.iter_mut().enumerate() {
            let scale = if layout.pose_range().contains(&k) { 0.6 } else { 1.0 };
            *a = (*a + cfg.walk_step * scale * normal(&mut rng)).clamp(-1.0, 1.0);
        }
    }
    Ok(frames)
}

/// The condition-extraction oracle: ground-truth α plus optional zero-mean
/// Gaussian jitter emulating estimator noise. Identity is untouched.
pub fn extract_condition(frame: &Frame, sigma: f64, rng: &mut impl Rng) -> Array1<f64> {
    if sigma == 0.0 {
        return frame.alpha.clone();
    }
    frame.alpha.mapv(|a| a + sigma * normal(rng))
}

/// Keeps frames 0, interval, 2*interval, ...
pub fn subsample(seq: &[Frame], interval: usize) -> Result<Vec<Frame>> {
    if interval == 0 {
        return Err(Error::InvalidConfig("subsample interval must be >= 1".into()));
    }
    Ok(seq.iter().step_by(interval).cloned().collect())
}

/// Uniformly samples an ordered pair of distinct indices.
pub fn sample_pair(len: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if len < 2 {
        return Err(Error::InvalidConfig("need at least two frames to pair".into()));
    }
    let i = rng.gen_range(0..len);
    let mut j = rng.gen_range(0..len - 1);
    if j >= i {
        j += 1;
    }
    Ok((i, j))
}

// ---- on-disk dataset ----
//
// Per identity: a directory with `frame_XXXX.png` plus `meta.txt`:
//   line 1: `meta v1 identity <seed> frames <n> resolution <r>`
//   then per frame: `frame <idx> alpha <A floats> cam <9 R> <3 t> <focal>
//   <cx> <cy> <w> <h> lm <2*LANDMARKS floats>`

pub fn write_identity_dir(dir: &Path, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut meta = String::new();
    let res = frames[0].camera.resolution.0;
    writeln!(meta, "meta v1 identity {} frames {} resolution {}", frames[0].identity, frames.len(), res).unwrap();
    for f in frames {
        f.image.save_png(&dir.join(format!("frame_{:04}.png", f.index)))?;
        write!(meta, "frame {}", f.index).unwrap();
        write!(meta, " alpha").unwrap();
        for a in f.alpha.iter() {
            write!(meta, " {a}").unwrap();
        }
        write!(meta, " cam").unwrap();
        for row in &f.camera.rotation {
            for v in row {
                write!(meta, " {v}").unwrap();
            }
        }
        for v in &f.camera.translation {
            write!(meta, " {v}").unwrap();
        }
        write!(
            meta,
            " {} {} {} {} {}",
            f.camera.focal,
            f.camera.principal[0],
            f.camera.principal[1],
            f.camera.resolution.0,
            f.camera.resolution.1
        )
        .unwrap();
        write!(meta, " lm").unwrap();
        for v in f.landmarks.iter() {
            write!(meta, " {v}").unwrap();
        }
        meta.push('\n');
    }
    crate::cli::write_atomic(&dir.join("meta.txt"), meta.as_bytes())?;
    Ok(())
}

pub fn read_identity_dir(dir: &Path) -> Result<Vec<Frame>> {
    let meta = std::fs::read_to_string(dir.join("meta.txt"))?;
    let mut lines = meta.lines();
    let header = lines.next().ok_or_else(|| Error::format("empty meta"))?;
    let hp: Vec<&str> = header.split_whitespace().collect();
    if hp.len() != 8 || hp[0] != "meta" || hp[1] != "v1" || hp[2] != "identity" || hp[4] != "frames" || hp[6] != "resolution" {
        return Err(Error::format("bad meta header"));
    }
    let identity: u64 = hp[3].parse().map_err(|_| Error::format("bad identity seed"))?;
    let alpha_total = AlphaLayout::default().total();
    let mut frames = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tk: Vec<&str> = line.split_whitespace().collect();
        let expect = 2 + 1 + alpha_total + 1 + 17 + 1 + 2 * LANDMARKS;
        if tk.len() != expect || tk[0] != "frame" {
            return Err(Error::format(format!("bad frame line: {} tokens, expected {expect}", tk.len())));
        }
        let index: usize = tk[1].parse().map_err(|_| Error::format("bad frame index"))?;
        let mut pos = 2;
        let mut take = |n: usize, label: &str| -> Result<Vec<f64>> {
            if tk[pos] != label {
                return Err(Error::format(format!("expected '{label}' marker")));
            }
            pos += 1;
            let out: Result<Vec<f64>> = tk[pos..pos + n]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::format(format!("bad float {s:?}"))))
                .collect();
            pos += n;
            out
        };
        let alpha = Array1::from(take(alpha_total, "alpha")?);
        let camv = take(17, "cam")?;
        let lm = take(2 * LANDMARKS, "lm")?;
        let rotation = [
            [camv[0], camv[1], camv[2]],
            [camv[3], camv[4], camv[5]],
            [camv[6], camv[7], camv[8]],
        ];
        let camera = Camera::new(
            rotation,
            [camv[9], camv[10], camv[11]],
            camv[12],
            [camv[13], camv[14]],
            (camv[15] as usize, camv[16] as usize),
        )?;
        let landmarks = Array2::from_shape_vec((LANDMARKS, 2), lm).map_err(|e| Error::shape(e.to_string()))?;
        let image = Image::load_png(&dir.join(format!("frame_{index:04}.png")))?;
        frames.push(Frame { image, alpha, landmarks, camera, identity, index });
    }
    Ok(frames)
}

/// Identity seeds of a dataset: train then held-out, derived from the root seed.
pub fn identity_seeds(cfg: &DatasetConfig, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut rng = substream(seed, "identities");
    let train = (0..cfg.train_identities).map(|_| rng.gen()).collect();
    let held = (0..cfg.heldout_identities).map(|_| rng.gen()).collect();
    (train, held)
}

/// Writes the full dataset layout: `<root>/train/id_XX/`, `<root>/heldout/id_XX/`.
pub fn write_dataset(root: &Path, cfg: &DatasetConfig, seed: u64) -> Result<()> {
    let (train, held) = identity_seeds(cfg, seed);
    for (sub, seeds) in [("train", &train), ("heldout", &held)] {
        for (i, &id_seed) in seeds.iter().enumerate() {
            let frames = generate_sequence(cfg, id_seed, seed, cfg.frames_per_identity)?;
            write_identity_dir(&root.join(sub).join(format!("id_{i:02}")), &frames)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{region_boxes, MOUTH_LM};

    fn small_cfg() -> DatasetConfig {
        DatasetConfig { frames_per_identity: 4, ..Default::default() }
    }

    #[test]
    fn sequences_are_bit_deterministic() {
        let cfg = small_cfg();
        let a = generate_sequence(&cfg, 11, 7, 4).unwrap();
        let b = generate_sequence(&cfg, 11, 7, 4).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(x.alpha, y.alpha);
            assert_eq!(x.landmarks, y.landmarks);
        }
        let c = generate_sequence(&cfg, 11, 8, 4).unwrap();
        assert_ne!(a[1].alpha, c[1].alpha);
    }

    #[test]
    fn mouth_width_alpha_maximizes_corner_separation() {
        let cfg = small_cfg();
        let id = IdentitySpec::from_seed(3);
        let layout = AlphaLayout::default();
        let mut alpha = Array1::zeros(layout.total());
        let cam = camera_for_alpha(&cfg, &alpha);
        let width_dim = layout.mouth_range().start + 1;
        alpha[width_dim] = 1.0;
        let wide = landmarks_for(&cfg, &id, &alpha, &cam);
        alpha[width_dim] = 0.0;
        let mid = landmarks_for(&cfg, &id, &alpha, &cam);
        let sep = |lm: &Array2<f64>| (lm[[7, 0]] - lm[[6, 0]]).abs();
        assert!(sep(&wide) > sep(&mid), "max width alpha must maximize corner separation");
        // Matches the analytic formula: separation scales with (1 + 0.25 a).
        let ratio = sep(&wide) / sep(&mid);
        assert!((ratio - 1.25).abs() < 0.03, "ratio {ratio}");
    }

    #[test]
    fn closed_mouth_shows_no_tooth_pixels() {
        let cfg = small_cfg();
        let id = IdentitySpec::from_seed(5);
        let layout = AlphaLayout::default();
        let mut alpha = Array1::zeros(layout.total());
        let mouth_open_dim = layout.mouth_range().start;

        let count_teeth = |alpha: &Array1<f64>| {
            let cam = camera_for_alpha(&cfg, alpha);
            let img = render_face(&cfg, &id, alpha, &cam);
            let lm = landmarks_for(&cfg, &id, alpha, &cam);
            let mouth_box = region_boxes(&lm, cam.resolution)[2];
            let mut count = 0;
            for y in mouth_box.y0..mouth_box.y1 {
                for x in mouth_box.x0..mouth_box.x1 {
                    let p = [img.data[[y, x, 0]], img.data[[y, x, 1]], img.data[[y, x, 2]]];
                    let mean = (p[0] + p[1] + p[2]) / 3.0;
                    let spread = p.iter().cloned().fold(f64::MIN, f64::max)
                        - p.iter().cloned().fold(f64::MAX, f64::min);
                    if mean > 0.72 && spread < 0.12 {
                        count += 1;
                    }
                }
            }
            count
        };

        alpha[mouth_open_dim] = -1.0; // closed
        assert_eq!(count_teeth(&alpha), 0, "closed mouth must show no teeth");
        alpha[mouth_open_dim] = 1.0; // open
        let open_count = count_teeth(&alpha);
        assert!(open_count > 0, "open mouth must show tooth stripes");
        let _ = MOUTH_LM;
    }

    #[test]
    fn eye_alpha_touches_only_eye_pixels() {
        let cfg = small_cfg();
        let id = IdentitySpec::from_seed(9);
        let layout = AlphaLayout::default();
        let mut a1 = Array1::zeros(layout.total());
        let mut a2 = a1.clone();
        a1[0] = 0.8;
        a2[0] = -0.8; // left eye openness
        let cam = camera_for_alpha(&cfg, &a1);
        let i1 = render_face(&cfg, &id, &a1, &cam);
        let i2 = render_face(&cfg, &id, &a2, &cam);
        let lm = landmarks_for(&cfg, &id, &a1, &cam);
        let boxes = region_boxes(&lm, cam.resolution);
        let mouth = boxes[2];
        let mut changed_outside_eyes = 0.0;
        for y in mouth.y0..mouth.y1 {
            for x in mouth.x0..mouth.x1 {
                for ch in 0..3 {
                    changed_outside_eyes += (i1.data[[y, x, ch]] - i2.data[[y, x, ch]]).abs();
                }
            }
        }
        assert_eq!(changed_outside_eyes, 0.0, "eye alpha must not move mouth pixels");
        let eye = boxes[0];
        let mut changed_eye = 0.0;
        for y in eye.y0..eye.y1 {
            for x in eye.x0..eye.x1 {
                for ch in 0..3 {
                    changed_eye += (i1.data[[y, x, ch]] - i2.data[[y, x, ch]]).abs();
                }
            }
        }
        assert!(changed_eye > 0.1, "eye alpha must move eye pixels");
    }

    #[test]
    fn condition_oracle_jitter_statistics() {
        let cfg = small_cfg();
        let frames = generate_sequence(&cfg, 21, 3, 1).unwrap();
        let mut rng = substream(99, "jitter");
        // sigma = 0: exact.
        assert_eq!(extract_condition(&frames[0], 0.0, &mut rng), frames[0].alpha);
        // sigma = 0.02: mean abs deviation over many draws approaches
        // 0.02 * sqrt(2/pi) ~= 0.01596.
        let n = 10_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let jittered = extract_condition(&frames[0], 0.02, &mut rng);
            acc += (&jittered - &frames[0].alpha).mapv(f64::abs).mean().unwrap();
        }
        let mad = acc / n as f64;
        let expected = 0.02 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mad - expected).abs() < 0.0008, "mad {mad} vs {expected}");
    }

    #[test]
    fn subsample_keeps_every_fifth_frame_in_order() {
        let cfg = DatasetConfig { frames_per_identity: 23, resolution: 16, focal: 21.5, ..Default::default() };
        let frames = generate_sequence(&cfg, 1, 1, 23).unwrap();
        let sub = subsample(&frames, 5).unwrap();
        assert_eq!(sub.len(), 5);
        let idx: Vec<usize> = sub.iter().map(|f| f.index).collect();
        assert_eq!(idx, vec![0, 5, 10, 15, 20]);
        let all = subsample(&frames, 1).unwrap();
        assert_eq!(all.len(), 23);
        assert!(subsample(&frames, 0).is_err());
    }

    #[test]
    fn sample_pair_is_distinct_and_uniform() {
        let mut rng = substream(4, "pairs");
        let n = 8;
        let cells = n * (n - 1);
        let draws = 10_000;
        let mut counts = vec![0usize; n * n];
        for _ in 0..draws {
            let (i, j) = sample_pair(n, &mut rng).unwrap();
            assert_ne!(i, j);
            counts[i * n + j] += 1;
        }
        let expected = draws as f64 / cells as f64;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|(k, _)| k % n != k / n)
            .map(|(_, &c)| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // df = 55; 0.999 quantile of chi^2_55 is 93.17 (two-sided sanity
        // margin; crossing it flags a real bias, not noise).
        assert!(chi2 < 93.17, "chi2 {chi2} too large for uniform ordered pairs");
        assert!(sample_pair(1, &mut rng).is_err());
    }

    #[test]
    fn dataset_roundtrips_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { frames_per_identity: 3, ..Default::default() };
        let frames = generate_sequence(&cfg, 77, 5, 3).unwrap();
        write_identity_dir(dir.path(), &frames).unwrap();
        let back = read_identity_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in frames.iter().zip(back.iter()) {
            assert_eq!(a.alpha, b.alpha);
            assert_eq!(a.landmarks, b.landmarks);
            assert_eq!(a.camera, b.camera);
            assert_eq!(a.identity, b.identity);
            // Images go through 8-bit PNG; compare quantized forms.
            assert_eq!(a.image.to_rgb8(), b.image.to_rgb8());
        }
    }

    #[test]
    fn eye_row_is_above_mouth_row_in_image_coordinates() {
        let cfg = small_cfg();
        let id = IdentitySpec::from_seed(2);
        let alpha = Array1::zeros(AlphaLayout::default().total());
        let cam = camera_for_alpha(&cfg, &alpha);
        let lm = landmarks_for(&cfg, &id, &alpha, &cam);
        assert!(lm[[2, 1]] < lm[[8, 1]], "eye center must be above mouth center");
    }
}
