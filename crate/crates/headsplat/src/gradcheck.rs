//! Finite-difference gradient checking. The checks here are the independent
//! oracle for every hand-derived adjoint and for the end-to-end training
//! gradient: central differences at double precision against the analytic
//! backward pass, reported as max relative error with an absolute floor.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::camera::{camera_from_pose, Camera};
use crate::gauss::GaussianSet;
use crate::render::{splat_backward, splat_forward_stateful, RenderOptions};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradReport {
    pub fn update(&mut self, rel: f64, label: impl Into<String>) {
        self.checked += 1;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = label.into();
        }
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= REL_TOL
    }
}

/// Relative error with the absolute floor: differences below the floor pass
/// regardless of scale.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    let diff = (analytic - fd).abs();
    if diff <= ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(fd.abs()).max(ABS_FLOOR)
}

/// A random valid Gaussian cloud around the origin: positions within `spread`,
/// mid-range opacities, sub-pixel to few-pixel scales, random orientations.
pub fn random_gaussian_set(rng: &mut impl Rng, n: usize, spread: f64) -> GaussianSet {
    let positions = Array2::from_shape_fn((n, 3), |_| (rng.gen::<f64>() * 2.0 - 1.0) * spread);
    let raw_colors = Array2::from_shape_fn((n, 3), |_| rng.gen::<f64>() * 4.0 - 2.0);
    let raw_opacities = Array1::from_shape_fn(n, |_| rng.gen::<f64>() * 4.0 - 2.0);
    let raw_scales = Array2::from_shape_fn((n, 3), |_| rng.gen::<f64>() * 1.6 - 2.8);
    let raw_rotations = Array2::from_shape_fn((n, 4), |_| rng.gen::<f64>() * 2.0 - 1.0 + 1e-3);
    GaussianSet::from_raw(positions, raw_colors, raw_opacities, raw_scales, raw_rotations).unwrap()
}

fn random_camera(rng: &mut impl Rng, res: usize) -> Camera {
    let pose: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 1.2 - 0.6).collect();
    camera_from_pose(&pose, res, 40.0 + rng.gen::<f64>() * 80.0, 3.5 + rng.gen::<f64>())
}

/// Weighted-pixel-sum loss of a reference-path render. A fixed random pixel
/// weighting makes the scalar sensitive to every pixel.
fn weighted_loss(set: &GaussianSet, cam: &Camera, weights: &Array3<f64>, opts: &RenderOptions) -> f64 {
    let (img, _) = splat_forward_stateful(set, cam, opts).unwrap();
    img.iter().zip(weights.iter()).map(|(a, b)| a * b).sum()
}

/// Checks the renderer's analytic gradients on one random scene, probing
/// `probes` parameters of each attribute array. Uses the smooth reference
/// path so finite differences see no cutoff discontinuities.
pub fn renderer_scene_check(rng: &mut impl Rng, n_gauss: usize, res: usize, probes: usize, report: &mut GradReport) {
    let set = random_gaussian_set(rng, n_gauss, 0.9);
    let cam = random_camera(rng, res);
    let opts = RenderOptions::reference().with_background([
        rng.gen::<f64>() * 0.5,
        rng.gen::<f64>() * 0.5,
        rng.gen::<f64>() * 0.5,
    ]);
    let weights = Array3::from_shape_fn((res, res, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);

    let (_, state) = splat_forward_stateful(&set, &cam, &opts).unwrap();
    let analytic = splat_backward(&state, &weights);

    // (attribute label, flattened length, analytic slice accessor)
    enum Attr {
        Pos,
        Col,
        Opa,
        Scl,
        Rot,
    }
    let attrs = [
        (Attr::Pos, set.positions.len()),
        (Attr::Col, set.colors.len()),
        (Attr::Opa, set.opacities.len()),
        (Attr::Scl, set.scales.len()),
        (Attr::Rot, set.rotations.len()),
    ];
    for (attr, len) in attrs {
        for pi in 0..probes.min(len) {
            // Deterministic stride keeps probes spread across gaussians.
            let idx = (pi * 7919) % len;
            let mut plus = set.clone();
            let mut minus = set.clone();
            let (an, label) = match attr {
                Attr::Pos => {
                    plus.positions.as_slice_mut().unwrap()[idx] += FD_STEP;
                    minus.positions.as_slice_mut().unwrap()[idx] -= FD_STEP;
                    (analytic.positions.as_slice().unwrap()[idx], format!("pos[{idx}]"))
                }
                Attr::Col => {
                    plus.colors.as_slice_mut().unwrap()[idx] += FD_STEP;
                    minus.colors.as_slice_mut().unwrap()[idx] -= FD_STEP;
                    (analytic.colors.as_slice().unwrap()[idx], format!("col[{idx}]"))
                }
                Attr::Opa => {
                    plus.opacities.as_slice_mut().unwrap()[idx] += FD_STEP;
                    minus.opacities.as_slice_mut().unwrap()[idx] -= FD_STEP;
                    (analytic.opacities.as_slice().unwrap()[idx], format!("opa[{idx}]"))
                }
                Attr::Scl => {
                    plus.scales.as_slice_mut().unwrap()[idx] += FD_STEP;
                    minus.scales.as_slice_mut().unwrap()[idx] -= FD_STEP;
                    (analytic.scales.as_slice().unwrap()[idx], format!("scl[{idx}]"))
                }
                Attr::Rot => {
                    // Perturbing a quaternion component off the unit sphere is
                    // fine: the renderer evaluates R(q) as a free function and
                    // the analytic gradient is taken in the same free sense.
                    plus.rotations.as_slice_mut().unwrap()[idx] += FD_STEP;
                    minus.rotations.as_slice_mut().unwrap()[idx] -= FD_STEP;
                    (analytic.rotations.as_slice().unwrap()[idx], format!("rot[{idx}]"))
                }
            };
            let fp = weighted_loss(&plus, &cam, &weights, &opts);
            let fm = weighted_loss(&minus, &cam, &weights, &opts);
            let fd = (fp - fm) / (2.0 * FD_STEP);
            report.update(rel_err(an, fd), label);
        }
    }
}

/// Runs the renderer gradient check over `scenes` random scenes.
pub fn renderer_gradcheck(seed: u64, scenes: usize, n_gauss: usize, res: usize, probes: usize) -> GradReport {
    let mut report = GradReport::default();
    for s in 0..scenes {
        let mut rng = crate::rng::substream_indexed(seed, "gradcheck/scene", s as u64);
        renderer_scene_check(&mut rng, n_gauss, res, probes, &mut report);
    }
    report
}

/// End-to-end check: the gradient of the pretrain loss w.r.t. randomly chosen
/// parameters across all modules, on a micro model, against central finite
/// differences. The model is nudged off its identity-at-init point first so
/// every residual branch and the restorer sit at a generic smooth position.
pub fn pipeline_gradcheck(seed: u64, n_params: usize) -> crate::Result<GradReport> {
    use crate::config::{BackboneConfig, MeshConfig, ModelConfig, TrainConfig};
    use crate::img::Image;
    use crate::losses::pretrain_loss_on_tape;
    use crate::model::Model;
    use crate::tape::Tape;
    use ndarray::{Array1, Array3};

    let cfg = ModelConfig {
        resolution: 16,
        backbone: BackboneConfig {
            width: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            tap_layers: vec![0],
            tap_channels: 4,
            fused_channels: 8,
            patch: 8,
        },
        mesh: MeshConfig { vertex_count: 16, ..Default::default() },
        canon_blocks: 1,
        canon_heads: 2,
        canon_ctx_tokens: 2,
        static_hidden: 8,
        vertex_embed: 4,
        dyn_grid: 4,
        dyn_channels: 4,
        reenact_hidden: 6,
        reenact_channels: 4,
        restore_channels: 4,
        restore_blocks: 3,
        ..Default::default()
    };
    let mut model = Model::init(cfg.clone(), seed)?;
    // Generic position: every block (including zero-init heads) gets noise.
    {
        let names: Vec<String> = model.store.names().cloned().collect();
        for name in names {
            let mut rng = crate::rng::substream(seed, &format!("gradcheck/noise/{name}"));
            let arr = model.store.get_mut(&name)?;
            arr.mapv_inplace(|v| v + 0.03 * crate::rng::normal(&mut rng));
        }
    }
    let mut rng = crate::rng::substream(seed, "gradcheck/pipeline");
    let source = Image::new(Array3::from_shape_fn((16, 16, 3), |_| rng.gen::<f64>()))?;
    let target = Image::new(Array3::from_shape_fn((16, 16, 3), |_| rng.gen::<f64>()))?;
    let alpha = Array1::from_shape_fn(cfg.alpha.total(), |_| rng.gen::<f64>() * 1.2 - 0.6);
    let cam = crate::camera::Camera::frontal(16, 21.5, 4.0);
    let tcfg = TrainConfig::default();
    let opts = RenderOptions::reference();

    let loss_of = |model: &Model| -> crate::Result<f64> {
        let mut tape = Tape::inference();
        let fwd = model.forward_train(&mut tape, &source, &alpha, &alpha, &cam, &opts)?;
        let tgt = tape.constant3(target.data.clone());
        let (loss, _, _) = pretrain_loss_on_tape(&mut tape, &tcfg, fwd.pred, tgt)?;
        Ok(tape.scalar(loss))
    };

    // Analytic gradients once.
    let analytic = {
        let mut tape = Tape::training();
        let fwd = model.forward_train(&mut tape, &source, &alpha, &alpha, &cam, &opts)?;
        let tgt = tape.constant3(target.data.clone());
        let (loss, _, _) = pretrain_loss_on_tape(&mut tape, &tcfg, fwd.pred, tgt)?;
        let grads = tape.backward(loss);
        tape.param_grads(&grads)
    };

    // Deterministically spread probes across all parameter blocks.
    let names: Vec<String> = analytic.keys().cloned().collect();
    let mut report = GradReport::default();
    for p in 0..n_params {
        let name = &names[(p * 131) % names.len()];
        let len = analytic[name].len();
        let idx = (p * 7919) % len;
        let an = analytic[name].as_slice().unwrap()[idx];
        let eval = |model: &mut Model, delta: f64| -> crate::Result<f64> {
            {
                let arr = model.store.get_mut(name)?;
                arr.as_slice_mut().unwrap()[idx] += delta;
            }
            let v = loss_of(model);
            {
                let arr = model.store.get_mut(name)?;
                arr.as_slice_mut().unwrap()[idx] -= delta;
            }
            v
        };
        let fp = eval(&mut model, FD_STEP)?;
        let fm = eval(&mut model, -FD_STEP)?;
        let fd = (fp - fm) / (2.0 * FD_STEP);
        report.update(rel_err(an, fd), format!("{name}[{idx}]"));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn renderer_gradients_match_finite_differences() {
        // Small but real: 3 scenes x 5 attribute arrays x 4 probes.
        let report = renderer_gradcheck(42, 3, 12, 24, 4);
        assert!(
            report.passes(),
            "max rel err {} at {} over {} probes",
            report.max_rel_err,
            report.worst,
            report.checked
        );
    }

    #[test]
    fn pipeline_gradients_match_finite_differences() {
        let report = pipeline_gradcheck(7, 12).unwrap();
        assert!(
            report.passes(),
            "max rel err {} at {} over {} probes",
            report.max_rel_err,
            report.worst,
            report.checked
        );
    }

    #[test]
    fn rel_err_floor_behaviour() {
        assert_eq!(rel_err(0.0, 5e-9), 0.0);
        assert!(rel_err(1.0, 1.002) > 1e-3);
        assert!(rel_err(1.0, 1.0000001) < 1e-3);
    }

    #[test]
    fn random_sets_are_valid() {
        let mut rng = substream(1, "rs");
        let set = random_gaussian_set(&mut rng, 33, 1.0);
        set.validate().unwrap();
        assert_eq!(set.len(), 33);
    }
}
