//! Pinhole camera (x right, y down, z forward) and the pose-to-camera mapping
//! used by the synthetic world: the head never moves, rigid head pose is
//! expressed as an orbiting camera.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ORTHONORMALITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation: p_cam = R p_world + t.
    pub translation: [f64; 3],
    /// Focal length, pixels (shared by both axes).
    pub focal: f64,
    /// Principal point, pixels.
    pub principal: [f64; 2],
    /// (width, height), pixels.
    pub resolution: (usize, usize),
}

impl Camera {
    pub fn new(
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        focal: f64,
        principal: [f64; 2],
        resolution: (usize, usize),
    ) -> Result<Self> {
        let cam = Self { rotation, translation, focal, principal, resolution };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::InvalidConfig(format!("focal must be > 0, got {}", self.focal)));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(Error::InvalidConfig("camera resolution must be positive".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() > ORTHONORMALITY_TOL {
                    return Err(Error::InvalidConfig(format!(
                        "rotation rows {i},{j} not orthonormal: dot {dot}"
                    )));
                }
            }
        }
        for row in r {
            for v in row {
                if !v.is_finite() {
                    return Err(Error::NonFinite("camera rotation".into()));
                }
            }
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera translation".into()));
        }
        Ok(())
    }

    pub fn world_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Pinhole projection of a world point to (u, v, depth). Depth <= 0 means
    /// the point is behind the camera.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let c = self.world_to_cam(p);
        let u = self.focal * c[0] / c[2] + self.principal[0];
        let v = self.focal * c[1] / c[2] + self.principal[1];
        (u, v, c[2])
    }

    /// Camera centered at the origin-facing default pose.
    pub fn frontal(resolution: usize, focal: f64, distance: f64) -> Camera {
        camera_from_pose(&[0.0; 6], resolution, focal, distance)
    }
}

/// Builds the orbit camera for a 6-dim pose block:
/// `[yaw, pitch, roll, tx, ty, log-distance]`, each nominally in [-1, 1].
///
/// Yaw/pitch orbit the camera around the head, roll spins the up vector,
/// tx/ty shift the look-at target, and the last entry scales the distance.
pub fn camera_from_pose(pose: &[f64], resolution: usize, focal: f64, distance: f64) -> Camera {
    assert!(pose.len() >= 6, "pose block needs 6 entries");
    let yaw = 0.35 * pose[0];
    let pitch = 0.25 * pose[1];
    let roll = 0.20 * pose[2];
    let target = [0.30 * pose[3], 0.30 * pose[4], 0.0];
    let dist = distance * (0.20 * pose[5]).exp();

    // Camera position on the orbit sphere, in front of the face (+z side).
    let pos = [
        target[0] + dist * yaw.sin() * pitch.cos(),
        target[1] + dist * pitch.sin(),
        target[2] + dist * yaw.cos() * pitch.cos(),
    ];

    // Look-at basis with y-down image convention.
    let fwd = normalize([target[0] - pos[0], target[1] - pos[1], target[2] - pos[2]]);
    let world_up = normalize([roll.sin(), roll.cos(), 0.0]);
    let right = normalize(cross(fwd, world_up));
    let down = cross(fwd, right); // unit, orthogonal to fwd and right
    let rotation = [right, down, fwd];
    let translation = [
        -(rotation[0][0] * pos[0] + rotation[0][1] * pos[1] + rotation[0][2] * pos[2]),
        -(rotation[1][0] * pos[0] + rotation[1][1] * pos[1] + rotation[1][2] * pos[2]),
        -(rotation[2][0] * pos[0] + rotation[2][1] * pos[1] + rotation[2][2] * pos[2]),
    ];
    Camera {
        rotation,
        translation,
        focal,
        principal: [resolution as f64 / 2.0, resolution as f64 / 2.0],
        resolution: (resolution, resolution),
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
