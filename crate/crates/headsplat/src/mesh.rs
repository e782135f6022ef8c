//! The fixed canonical head: a deterministic K-vertex ellipsoid point set with
//! denser sampling around the eye and mouth zones. Stands in for a morphable
//! head model; vertex positions anchor the static Gaussians.

use ndarray::Array2;

use crate::config::MeshConfig;
use crate::error::{Error, Result};

const GOLDEN_ANGLE: f64 = 2.399963229728653; // pi * (3 - sqrt(5))

/// Zone centers on the unit front hemisphere (u = x-ish, v = y-ish); kept in
/// sync with the synthetic world's feature placement.
pub const EYE_CENTER_U: f64 = 0.28;
pub const EYE_CENTER_V: f64 = 0.25;
pub const MOUTH_CENTER_V: f64 = -0.42;

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalMesh {
    /// K x 3 vertex positions, world units.
    pub vertices: Array2<f64>,
    /// Per-vertex embedding index (identity mapping into the learned table).
    pub embedding_ids: Vec<u32>,
}

impl CanonicalMesh {
    pub fn len(&self) -> usize {
        self.vertices.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds the canonical head mesh. Pure function of the config: the same
/// config always produces bit-identical vertices.
pub fn toy_head_mesh(cfg: &MeshConfig) -> Result<CanonicalMesh> {
    let k = cfg.vertex_count;
    if k < 16 {
        return Err(Error::InvalidConfig(format!("mesh needs >= 16 vertices, got {k}")));
    }
    let zone_total = ((cfg.zone_fraction.clamp(0.0, 0.9) * k as f64).round() as usize).min(k - 8);
    let base = k - zone_total;
    let per_eye = zone_total * 3 / 10;
    let mouth = zone_total - 2 * per_eye;

    let mut dirs: Vec<[f64; 3]> = Vec::with_capacity(k);
    // Base layer: golden-angle spiral over the full sphere.
    for i in 0..base {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / base as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = i as f64 * GOLDEN_ANGLE;
        dirs.push([r * phi.cos(), z, r * phi.sin()]);
    }
    // Zone layers: spiral caps around eye/mouth centers.
    let eye_l = front_dir(-EYE_CENTER_U, EYE_CENTER_V);
    let eye_r = front_dir(EYE_CENTER_U, EYE_CENTER_V);
    let mouth_c = front_dir(0.0, MOUTH_CENTER_V);
    cap_spiral(&mut dirs, eye_l, 0.30, per_eye);
    cap_spiral(&mut dirs, eye_r, 0.30, per_eye);
    cap_spiral(&mut dirs, mouth_c, 0.38, mouth);

    let [ax, ay, az] = cfg.geometry.semi_axes;
    let vertices = Array2::from_shape_fn((k, 3), |(i, j)| {
        let d = dirs[i];
        match j {
            0 => ax * d[0],
            1 => ay * d[1],
            _ => az * d[2],
        }
    });
    let embedding_ids = (0..k as u32).collect();
    Ok(CanonicalMesh { vertices, embedding_ids })
}

fn front_dir(u: f64, v: f64) -> [f64; 3] {
    let z = (1.0 - u * u - v * v).max(0.0).sqrt();
    [u, v, z]
}

/// Appends `m` directions spiraling over the spherical cap of angular radius
/// `theta_max` around `center`.
fn cap_spiral(out: &mut Vec<[f64; 3]>, center: [f64; 3], theta_max: f64, m: usize) {
    if m == 0 {
        return;
    }
    // Orthonormal frame with e3 = center.
    let e3 = center;
    let pick = if e3[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalize(cross(pick, e3));
    let e2 = cross(e3, e1);
    let cos_max = theta_max.cos();
    for i in 0..m {
        let c = 1.0 - (1.0 - cos_max) * (i as f64 + 0.5) / m as f64;
        let s = (1.0 - c * c).sqrt();
        let phi = i as f64 * GOLDEN_ANGLE;
        let (sp, cp) = phi.sin_cos();
        out.push([
            c * e3[0] + s * (cp * e1[0] + sp * e2[0]),
            c * e3[1] + s * (cp * e1[1] + sp * e2[1]),
            c * e3[2] + s * (cp * e1[2] + sp * e2[2]),
        ]);
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
