//! Differentiable Gaussian splatting: perspective projection of a 3D Gaussian
//! cloud to screen-space ellipses, then front-to-back alpha compositing.
//!
//! Two rasterization paths share the same math:
//! - `Tiled`: per-gaussian influence cutoff, tile binning, early transmittance
//!   stop. Used for training and the drive loop.
//! - `Reference`: every gaussian evaluated at every pixel, no cutoffs. Smooth
//!   everywhere; gradient checks run against it and the tiled path must match
//!   it to 1e-3 per pixel.
//!
//! The backward pass is a hand-derived adjoint of the full chain (quaternion ->
//! rotation -> 3D covariance -> camera frame -> perspective Jacobian -> 2D
//! covariance -> compositing), validated against central finite differences.

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gauss::GaussianSet;
use crate::img::Image;
use crate::tape::{Tape, Var};

/// Anti-aliasing floor added to the 2D covariance diagonal, px^2.
pub const COV2D_FLOOR: f64 = 0.3;
/// Near plane, camera units; gaussians at or behind it are culled.
pub const NEAR_PLANE: f64 = 0.1;
/// Tiled path: skip a gaussian at a pixel once its alpha there is below this.
/// Keeps the per-pixel deviation from the reference path under 1e-6 per
/// gaussian, comfortably inside the 1e-3 budget for desk-scale clouds.
const ALPHA_CUTOFF: f64 = 1e-6;
/// Tiled path: stop compositing a pixel once transmittance drops below this.
const TRANSMITTANCE_STOP: f64 = 1e-8;
/// Minimum squared cutoff radius in the Mahalanobis metric (3-sigma ellipse).
const MIN_CUTOFF_R2: f64 = 9.0;
const TILE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterPath {
    Reference,
    Tiled,
}

#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub path: RasterPath,
    pub background: [f64; 3],
    /// Row-parallel forward rasterization (bit-identical to serial).
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { path: RasterPath::Tiled, background: [0.0; 3], parallel: false }
    }
}

impl RenderOptions {
    pub fn reference() -> Self {
        Self { path: RasterPath::Reference, ..Default::default() }
    }
    pub fn with_background(mut self, bg: [f64; 3]) -> Self {
        self.background = bg;
        self
    }
}

/// A Gaussian after projection: screen mean, 2D covariance (xx, xy, yy) with
/// the anti-alias floor applied, camera depth, and shading attributes.
/// `source` indexes the input set and is the deterministic compositing
/// tie-break for equal depths.
#[derive(Debug, Clone)]
pub struct ScreenGaussian {
    pub mean: [f64; 2],
    pub cov: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub source: usize,
}

/// Per-gaussian projection intermediates kept for the backward pass.
#[derive(Debug, Clone)]
struct ProjSaved {
    p_cam: [f64; 3],
    rot: [[f64; 3]; 3],
    sigma3: [[f64; 3]; 3],
    /// A = J * W (2x3).
    a: [[f64; 3]; 2],
    quat: [f64; 4],
    scale: [f64; 3],
}

fn quat_to_rot(q: [f64; 4]) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn project_full(set: &GaussianSet, cam: &Camera) -> (Vec<ScreenGaussian>, Vec<ProjSaved>) {
    let n = set.len();
    let mut screen = Vec::with_capacity(n);
    let mut saved = Vec::with_capacity(n);
    let w = &cam.rotation;
    let f = cam.focal;
    for k in 0..n {
        let p = [set.positions[[k, 0]], set.positions[[k, 1]], set.positions[[k, 2]]];
        let pc = cam.world_to_cam(p);
        if pc[2] <= NEAR_PLANE {
            continue;
        }
        let (px, py, pz) = (pc[0], pc[1], pc[2]);
        let mean = [f * px / pz + cam.principal[0], f * py / pz + cam.principal[1]];

        let q = [
            set.rotations[[k, 0]],
            set.rotations[[k, 1]],
            set.rotations[[k, 2]],
            set.rotations[[k, 3]],
        ];
        let rot = quat_to_rot(q);
        let s = [set.scales[[k, 0]], set.scales[[k, 1]], set.scales[[k, 2]]];
        let mut sigma3 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                sigma3[i][j] = (0..3).map(|m| rot[i][m] * s[m] * s[m] * rot[j][m]).sum();
            }
        }
        let j_mat = [[f / pz, 0.0, -f * px / (pz * pz)], [0.0, f / pz, -f * py / (pz * pz)]];
        let mut a = [[0.0; 3]; 2];
        for i in 0..2 {
            for jj in 0..3 {
                a[i][jj] = (0..3).map(|m| j_mat[i][m] * w[m][jj]).sum();
            }
        }
        let mut tmp = [[0.0; 3]; 2];
        for i in 0..2 {
            for jj in 0..3 {
                tmp[i][jj] = (0..3).map(|m| a[i][m] * sigma3[m][jj]).sum();
            }
        }
        let cov = [
            (0..3).map(|m| tmp[0][m] * a[0][m]).sum::<f64>() + COV2D_FLOOR,
            (0..3).map(|m| tmp[0][m] * a[1][m]).sum(),
            (0..3).map(|m| tmp[1][m] * a[1][m]).sum::<f64>() + COV2D_FLOOR,
        ];

        screen.push(ScreenGaussian {
            mean,
            cov,
            depth: pz,
            color: [set.colors[[k, 0]], set.colors[[k, 1]], set.colors[[k, 2]]],
            opacity: set.opacities[k],
            source: k,
        });
        saved.push(ProjSaved { p_cam: pc, rot, sigma3, a, quat: q, scale: s });
    }
    (screen, saved)
}

/// Projects a Gaussian set through a camera, culling gaussians behind the
/// near plane. Every surviving covariance is SPD (the floor guarantees it).
pub fn project(set: &GaussianSet, cam: &Camera) -> Vec<ScreenGaussian> {
    project_full(set, cam).0
}

fn composite_order(screen: &[ScreenGaussian]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..screen.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        let (ga, gb) = (&screen[a as usize], &screen[b as usize]);
        ga.depth.partial_cmp(&gb.depth).unwrap().then(ga.source.cmp(&gb.source))
    });
    order
}

struct InvCov {
    inv: [f64; 3],
    rmax2: f64,
    /// Pixel-space half extents of the cutoff ellipse.
    ext: [f64; 2],
}

fn invert_cov(g: &ScreenGaussian, path: RasterPath) -> Result<InvCov> {
    let [a, b, c] = g.cov;
    let det = a * c - b * b;
    if !(det > 1e-12 && a > 0.0) {
        return Err(Error::format(format!("non-SPD screen covariance ({a}, {b}, {c})")));
    }
    let inv = [c / det, -b / det, a / det];
    let rmax2 = match path {
        RasterPath::Reference => f64::INFINITY,
        RasterPath::Tiled => (2.0 * (g.opacity / ALPHA_CUTOFF).ln()).max(MIN_CUTOFF_R2),
    };
    let ext = if rmax2.is_finite() {
        [(rmax2 * a).sqrt(), (rmax2 * c).sqrt()]
    } else {
        [f64::INFINITY; 2]
    };
    Ok(InvCov { inv, rmax2, ext })
}

type Contribs = Vec<Vec<(u32, f64)>>;

#[allow(clippy::too_many_arguments)]
fn composite_pixel(
    px: f64,
    py: f64,
    ids: &[u32],
    screen: &[ScreenGaussian],
    invs: &[InvCov],
    background: [f64; 3],
    tiled: bool,
    mut record: Option<&mut Vec<(u32, f64)>>,
) -> [f64; 3] {
    let mut color = [0.0; 3];
    let mut trans = 1.0;
    for &si in ids {
        let g = &screen[si as usize];
        let ic = &invs[si as usize];
        let dx = px - g.mean[0];
        let dy = py - g.mean[1];
        if tiled && (dx.abs() > ic.ext[0] || dy.abs() > ic.ext[1]) {
            continue;
        }
        let r2 = ic.inv[0] * dx * dx + 2.0 * ic.inv[1] * dx * dy + ic.inv[2] * dy * dy;
        if tiled && r2 > ic.rmax2 {
            continue;
        }
        let alpha = g.opacity * (-0.5 * r2).exp();
        let w = alpha * trans;
        color[0] += g.color[0] * w;
        color[1] += g.color[1] * w;
        color[2] += g.color[2] * w;
        trans *= 1.0 - alpha;
        if let Some(rec) = record.as_deref_mut() {
            rec.push((si, alpha));
        }
        if tiled && trans < TRANSMITTANCE_STOP {
            break;
        }
    }
    color[0] += background[0] * trans;
    color[1] += background[1] * trans;
    color[2] += background[2] * trans;
    color
}

fn rasterize_full(
    screen: &[ScreenGaussian],
    resolution: (usize, usize),
    opts: &RenderOptions,
    record: bool,
) -> Result<(Array3<f64>, Vec<InvCov>, Option<Contribs>)> {
    let (w, h) = resolution;
    let order = composite_order(screen);
    let invs: Vec<InvCov> = screen.iter().map(|g| invert_cov(g, opts.path)).collect::<Result<_>>()?;
    let tiled = opts.path == RasterPath::Tiled;

    // Tile binning: each tile's list stays depth-sorted because gaussians are
    // inserted in global sorted order. The reference path uses one full list.
    let (tiles_x, tile_lists) = if tiled {
        let tiles_x = w.div_ceil(TILE);
        let tiles_y = h.div_ceil(TILE);
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
        for &si in &order {
            let g = &screen[si as usize];
            let ic = &invs[si as usize];
            let x0 = (((g.mean[0] - ic.ext[0]) / TILE as f64).floor()).max(0.0) as usize;
            let y0 = (((g.mean[1] - ic.ext[1]) / TILE as f64).floor()).max(0.0) as usize;
            let x1 = (((g.mean[0] + ic.ext[0]) / TILE as f64).floor() as isize).min(tiles_x as isize - 1);
            let y1 = (((g.mean[1] + ic.ext[1]) / TILE as f64).floor() as isize).min(tiles_y as isize - 1);
            if x1 < x0 as isize || y1 < y0 as isize || x0 >= tiles_x || y0 >= tiles_y {
                continue;
            }
            for ty in y0..=y1 as usize {
                for tx in x0..=x1 as usize {
                    lists[ty * tiles_x + tx].push(si);
                }
            }
        }
        (tiles_x, lists)
    } else {
        (1, vec![order])
    };

    let mut img = Array3::<f64>::zeros((h, w, 3));
    let mut contribs: Option<Contribs> = record.then(|| vec![Vec::new(); h * w]);

    let row_job = |i: usize, row_img: &mut [f64], mut row_rec: Option<&mut [Vec<(u32, f64)>]>| {
        let py = i as f64 + 0.5;
        for j in 0..w {
            let px = j as f64 + 0.5;
            let ids: &[u32] =
                if tiled { &tile_lists[(i / TILE) * tiles_x + j / TILE] } else { &tile_lists[0] };
            let rec = row_rec.as_deref_mut().map(|r| &mut r[j]);
            let c = composite_pixel(px, py, ids, screen, &invs, opts.background, tiled, rec);
            row_img[j * 3..j * 3 + 3].copy_from_slice(&c);
        }
    };

    let slice = img.as_slice_mut().unwrap();
    match &mut contribs {
        Some(c) => {
            for (i, (row, rec)) in slice.chunks_mut(w * 3).zip(c.chunks_mut(w)).enumerate() {
                row_job(i, row, Some(rec));
            }
        }
        None if opts.parallel => {
            slice.par_chunks_mut(w * 3).enumerate().for_each(|(i, row)| row_job(i, row, None));
        }
        None => {
            for (i, row) in slice.chunks_mut(w * 3).enumerate() {
                row_job(i, row, None);
            }
        }
    }
    Ok((img, invs, contribs))
}

/// Rasterizes screen gaussians into an image. Front-to-back by (depth, source
/// index); identical inputs give bit-identical output regardless of `parallel`.
pub fn rasterize(
    screen: &[ScreenGaussian],
    resolution: (usize, usize),
    opts: &RenderOptions,
) -> Result<Image> {
    let (img, _, _) = rasterize_full(screen, resolution, opts, false)?;
    Image::new(img)
}

/// Projects and rasterizes in one call.
pub fn render(set: &GaussianSet, cam: &Camera, opts: &RenderOptions) -> Result<Image> {
    let screen = project(set, cam);
    rasterize(&screen, cam.resolution, opts)
}

// ---- differentiable entry point ----

/// Gradients of a scalar loss w.r.t. activated gaussian attributes.
pub struct SplatGrads {
    pub positions: Array2<f64>,
    pub colors: Array2<f64>,
    pub opacities: Array1<f64>,
    pub scales: Array2<f64>,
    pub rotations: Array2<f64>,
}

pub struct SplatState {
    screen: Vec<ScreenGaussian>,
    saved: Vec<ProjSaved>,
    contribs: Contribs,
    invs: Vec<InvCov>,
    n: usize,
    focal: f64,
    cam_rot: [[f64; 3]; 3],
    background: [f64; 3],
    resolution: (usize, usize),
}

/// Forward render that also keeps the state needed by [`splat_backward`].
pub fn splat_forward_stateful(
    set: &GaussianSet,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<(Array3<f64>, SplatState)> {
    let (screen, saved) = project_full(set, cam);
    let (img, invs, contribs) = rasterize_full(&screen, cam.resolution, opts, true)?;
    Ok((
        img,
        SplatState {
            screen,
            saved,
            contribs: contribs.unwrap(),
            invs,
            n: set.len(),
            focal: cam.focal,
            cam_rot: cam.rotation,
            background: opts.background,
            resolution: cam.resolution,
        },
    ))
}

/// Adjoint of the renderer: pixel gradients in, attribute gradients out.
pub fn splat_backward(state: &SplatState, g_img: &Array3<f64>) -> SplatGrads {
    let (w, _h) = state.resolution;
    let m = state.screen.len();
    let mut g_mean = vec![[0.0; 2]; m];
    // (xx, b, yy) where b is the gradient w.r.t. the single shared
    // off-diagonal parameter (it appears in both matrix entries).
    let mut g_cov = vec![[0.0; 3]; m];
    let mut g_color = vec![[0.0; 3]; m];
    let mut g_opacity = vec![0.0; m];

    for (pix, entries) in state.contribs.iter().enumerate() {
        if entries.is_empty() {
            continue;
        }
        let i = pix / w;
        let j = pix % w;
        let gp = [g_img[[i, j, 0]], g_img[[i, j, 1]], g_img[[i, j, 2]]];
        if gp == [0.0; 3] {
            continue;
        }
        let px = j as f64 + 0.5;
        let py = i as f64 + 0.5;
        let mut trans = vec![1.0; entries.len() + 1];
        for (e, &(_, alpha)) in entries.iter().enumerate() {
            trans[e + 1] = trans[e] * (1.0 - alpha);
        }
        // suffix[ch] = sum_{e' > e} c_e' a_e' T_e' + bg * T_end (raw colors,
        // not yet weighted by the pixel gradient).
        let t_end = trans[entries.len()];
        let mut suffix = [
            state.background[0] * t_end,
            state.background[1] * t_end,
            state.background[2] * t_end,
        ];
        for e in (0..entries.len()).rev() {
            let (si, alpha) = entries[e];
            let g = &state.screen[si as usize];
            let t_i = trans[e];
            let mut g_alpha = 0.0;
            for ch in 0..3 {
                g_color[si as usize][ch] += gp[ch] * alpha * t_i;
                g_alpha += gp[ch] * (t_i * g.color[ch] - suffix[ch] / (1.0 - alpha));
            }
            let kernel = alpha / g.opacity;
            g_opacity[si as usize] += g_alpha * kernel;
            let g_r2 = -0.5 * g_alpha * alpha;
            let ic = &state.invs[si as usize].inv;
            let dx = px - g.mean[0];
            let dy = py - g.mean[1];
            let mx = ic[0] * dx + ic[1] * dy;
            let my = ic[1] * dx + ic[2] * dy;
            g_mean[si as usize][0] -= g_r2 * 2.0 * mx;
            g_mean[si as usize][1] -= g_r2 * 2.0 * my;
            g_cov[si as usize][0] -= g_r2 * mx * mx;
            g_cov[si as usize][1] -= g_r2 * 2.0 * mx * my;
            g_cov[si as usize][2] -= g_r2 * my * my;

            for ch in 0..3 {
                suffix[ch] += g.color[ch] * alpha * t_i;
            }
        }
    }

    let mut out = SplatGrads {
        positions: Array2::zeros((state.n, 3)),
        colors: Array2::zeros((state.n, 3)),
        opacities: Array1::zeros(state.n),
        scales: Array2::zeros((state.n, 3)),
        rotations: Array2::zeros((state.n, 4)),
    };
    let f = state.focal;
    let wrot = &state.cam_rot;
    for (si, sg) in state.screen.iter().enumerate() {
        let k = sg.source;
        let sv = &state.saved[si];
        for ch in 0..3 {
            out.colors[[k, ch]] = g_color[si][ch];
        }
        out.opacities[k] = g_opacity[si];

        let [px, py, pz] = sv.p_cam;
        let gu = g_mean[si][0];
        let gv = g_mean[si][1];
        let mut g_pcam = [gu * f / pz, gv * f / pz, -f * (px * gu + py * gv) / (pz * pz)];

        // Full-matrix 2x2 covariance gradient.
        let gm = [[g_cov[si][0], 0.5 * g_cov[si][1]], [0.5 * g_cov[si][1], g_cov[si][2]]];
        // gSigma3 = A^T Gm A
        let mut g_sigma3 = [[0.0; 3]; 3];
        for ai in 0..3 {
            for bi in 0..3 {
                let mut acc = 0.0;
                for r in 0..2 {
                    for c in 0..2 {
                        acc += sv.a[r][ai] * gm[r][c] * sv.a[c][bi];
                    }
                }
                g_sigma3[ai][bi] = acc;
            }
        }
        // gA = 2 Gm A Sigma3
        let mut g_a = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for c2 in 0..2 {
                    for mm in 0..3 {
                        acc += 2.0 * gm[r][c2] * sv.a[c2][mm] * sv.sigma3[mm][c];
                    }
                }
                g_a[r][c] = acc;
            }
        }
        // A = J W => gJ = gA W^T
        let mut g_j = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                g_j[r][c] = (0..3).map(|mm| g_a[r][mm] * wrot[c][mm]).sum();
            }
        }
        let z2 = pz * pz;
        let z3 = z2 * pz;
        g_pcam[0] += g_j[0][2] * (-f / z2);
        g_pcam[1] += g_j[1][2] * (-f / z2);
        g_pcam[2] += g_j[0][0] * (-f / z2)
            + g_j[1][1] * (-f / z2)
            + g_j[0][2] * (2.0 * f * px / z3)
            + g_j[1][2] * (2.0 * f * py / z3);

        for c in 0..3 {
            out.positions[[k, c]] = (0..3).map(|r| wrot[r][c] * g_pcam[r]).sum();
        }

        // Sigma3 = R diag(s^2) R^T.
        let mut g_rot = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = 0.0;
                for mm in 0..3 {
                    acc += 2.0 * g_sigma3[r][mm] * sv.rot[mm][c] * sv.scale[c] * sv.scale[c];
                }
                g_rot[r][c] = acc;
            }
        }
        for c in 0..3 {
            let mut gd = 0.0;
            for r1 in 0..3 {
                for r2 in 0..3 {
                    gd += sv.rot[r1][c] * g_sigma3[r1][r2] * sv.rot[r2][c];
                }
            }
            out.scales[[k, c]] = gd * 2.0 * sv.scale[c];
        }
        let [qw, qx, qy, qz] = sv.quat;
        let dr = [
            [[0.0, -2.0 * qz, 2.0 * qy], [2.0 * qz, 0.0, -2.0 * qx], [-2.0 * qy, 2.0 * qx, 0.0]],
            [[0.0, 2.0 * qy, 2.0 * qz], [2.0 * qy, -4.0 * qx, -2.0 * qw], [2.0 * qz, 2.0 * qw, -4.0 * qx]],
            [[-4.0 * qy, 2.0 * qx, 2.0 * qw], [2.0 * qx, 0.0, 2.0 * qz], [-2.0 * qw, 2.0 * qz, -4.0 * qy]],
            [[-4.0 * qz, -2.0 * qw, 2.0 * qx], [2.0 * qw, -4.0 * qz, 2.0 * qy], [2.0 * qx, 2.0 * qy, 0.0]],
        ];
        for (qi, drq) in dr.iter().enumerate() {
            let mut acc = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    acc += g_rot[r][c] * drq[r][c];
                }
            }
            out.rotations[[k, qi]] = acc;
        }
    }
    out
}

/// Registers the splat render as a tape op over activated attributes.
/// Shapes: positions Nx3, colors Nx3, opacities N, scales Nx3, rotations Nx4.
#[allow(clippy::too_many_arguments)]
pub fn splat_op(
    tape: &mut Tape,
    positions: Var,
    colors: Var,
    opacities: Var,
    scales: Var,
    rotations: Var,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<Var> {
    // Sigmoid saturation can park an opacity at exactly 1.0 during training;
    // snap it inside the open interval (gradient there is ~0 anyway).
    let opac: Array1<f64> = tape
        .val(opacities)
        .mapv(|o| o.clamp(crate::gauss::OPACITY_EPS, 1.0 - crate::gauss::OPACITY_EPS))
        .into_dimensionality()
        .map_err(|e| Error::shape(e.to_string()))?;
    let set = GaussianSet::from_activated(
        tape.val2(positions),
        tape.val2(colors),
        opac,
        tape.val2(scales),
        tape.val2(rotations),
    )?;
    if tape.grad_enabled() {
        let (img, state) = splat_forward_stateful(&set, cam, opts)?;
        Ok(tape.push(
            img.into_dyn(),
            Some(Box::new(move |g, _vals, slots| {
                let g3: Array3<f64> = g.into_dimensionality().unwrap();
                let grads = splat_backward(&state, &g3);
                crate::tape::acc_external(slots, rotations, grads.rotations.into_dyn());
                crate::tape::acc_external(slots, scales, grads.scales.into_dyn());
                crate::tape::acc_external(slots, opacities, grads.opacities.into_dyn());
                crate::tape::acc_external(slots, colors, grads.colors.into_dyn());
                crate::tape::acc_external(slots, positions, grads.positions.into_dyn());
            })),
        ))
    } else {
        let screen = project(&set, cam);
        let (img, _, _) = rasterize_full(&screen, cam.resolution, opts, false)?;
        Ok(tape.push(img.into_dyn(), None))
    }
}
