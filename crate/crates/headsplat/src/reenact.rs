//! The ultra-light drive path: control vector in, dynamic gaussian positions
//! out. A two-layer MLP lifts the (eye, mouth, expression) sub-blocks to a
//! small grid, two upsampling convolutions grow it to the dynamic grid, and a
//! 1x1 head plus learned anchors place each gaussian inside the head volume
//! via a scaled tanh. Pose never enters here: rigid head pose is the camera.
//!
//! Nothing in this module reads a backbone-sized tensor; its FLOP count is a
//! function of the control dimension and N_dyn only.

use ndarray::{Array1, Array2};

use crate::backbone::linear;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::weights::{self, tape_param, WeightStore};

/// Base grid edge the MLP writes into before upsampling.
const BASE_GRID: usize = 4;

/// Maps the drive sub-vector (eye ∥ mouth ∥ expression) to N_dyn x 3 world
/// positions bounded inside the head's bounding box by a scaled tanh.
pub fn drive_positions(
    tape: &mut Tape,
    store: &WeightStore,
    cfg: &ModelConfig,
    alpha_drive: &[f64],
) -> Result<Var> {
    if alpha_drive.len() != cfg.alpha.drive_dims() {
        return Err(Error::shape(format!(
            "drive vector has {} entries, config says {}",
            alpha_drive.len(),
            cfg.alpha.drive_dims()
        )));
    }
    let c = cfg.reenact_channels;
    let x = tape.constant2(Array2::from_shape_vec((1, alpha_drive.len()), alpha_drive.to_vec()).unwrap());
    let h = linear(tape, store, x, "reenact.mlp1");
    let h = tape.gelu(h);
    let h = linear(tape, store, h, "reenact.mlp2");
    let mut grid = tape.reshape(h, &[c, BASE_GRID, BASE_GRID]);

    let mut size = BASE_GRID;
    let mut stage = 0;
    while size < cfg.dyn_grid {
        grid = tape.upsample2(grid);
        let w = tape_param(tape, store, &format!("reenact.conv{stage}.w"));
        let b = tape_param(tape, store, &format!("reenact.conv{stage}.b"));
        grid = tape.conv2d(grid, w, b, 3, 1, 1);
        grid = tape.gelu(grid);
        size *= 2;
        stage += 1;
    }
    let wh = tape_param(tape, store, "reenact.head.w");
    let bh = tape_param(tape, store, "reenact.head.b");
    let out = tape.conv2d(grid, wh, bh, 1, 1, 0); // 3 x G x G
    let n = cfg.n_dyn();
    let flat = tape.reshape(out, &[3, n]);
    let rows = tape.transpose2(flat); // N x 3

    let anchors = tape_param(tape, store, "reenact.anchors");
    let pre = tape.add(rows, anchors);
    let bounded = tape.tanh(pre);
    let semi = cfg.mesh.geometry.semi_axes;
    let scale = tape.constant2(Array2::from_shape_fn((n, 3), |(_, j)| semi[j]));
    Ok(tape.mul(bounded, scale))
}

/// Deterministic anchor initialization: a front-facing grid spread over the
/// head, in pre-tanh coordinates.
fn anchor_init(cfg: &ModelConfig) -> Array2<f64> {
    let g = cfg.dyn_grid;
    let mut anchors = Array2::zeros((g * g, 3));
    for gi in 0..g {
        for gj in 0..g {
            let k = gi * g + gj;
            let u = ((gj as f64 + 0.5) / g as f64 * 2.0 - 1.0) * 0.75;
            // Image rows grow downward; head +y is up.
            let v = -((gi as f64 + 0.5) / g as f64 * 2.0 - 1.0) * 0.75;
            let z = (1.0 - u * u - v * v).max(0.04).sqrt() * 0.85;
            anchors[[k, 0]] = atanh_clamped(u);
            anchors[[k, 1]] = atanh_clamped(v);
            anchors[[k, 2]] = atanh_clamped(z);
        }
    }
    anchors
}

fn atanh_clamped(x: f64) -> f64 {
    let x = x.clamp(-0.995, 0.995);
    0.5 * ((1.0 + x) / (1.0 - x)).ln()
}

pub fn init_reenact(store: &mut WeightStore, cfg: &ModelConfig, seed: u64) {
    let c = cfg.reenact_channels;
    let d = cfg.alpha.drive_dims();
    weights::init_linear(store, seed, "reenact.mlp1.w", d, cfg.reenact_hidden);
    weights::init_zeros1(store, "reenact.mlp1.b", cfg.reenact_hidden);
    weights::init_linear(store, seed, "reenact.mlp2.w", cfg.reenact_hidden, c * BASE_GRID * BASE_GRID);
    weights::init_zeros1(store, "reenact.mlp2.b", c * BASE_GRID * BASE_GRID);
    let mut size = BASE_GRID;
    let mut stage = 0;
    while size < cfg.dyn_grid {
        weights::init_conv(store, seed, &format!("reenact.conv{stage}.w"), c, c, 3);
        weights::init_zeros1(store, &format!("reenact.conv{stage}.b"), c);
        size *= 2;
        stage += 1;
    }
    // Zero-init head: positions start exactly at the anchor layout.
    weights::init_zeros2(store, "reenact.head.w", 3, c);
    weights::init_zeros1(store, "reenact.head.b", 3);
    store.insert("reenact.anchors", anchor_init(cfg).into_dyn());
}

/// Analytic FLOP count of one drive_positions call. Depends on the control
/// dimension and the dynamic grid only — asserted against backbone scaling in
/// the separation tests.
pub fn drive_flops(cfg: &ModelConfig) -> u64 {
    let c = cfg.reenact_channels as u64;
    let d = cfg.alpha.drive_dims() as u64;
    let h = cfg.reenact_hidden as u64;
    let base = (BASE_GRID * BASE_GRID) as u64;
    let mut flops = 2 * d * h + 2 * h * c * base;
    let mut size = BASE_GRID as u64;
    while size < cfg.dyn_grid as u64 {
        size *= 2;
        flops += 2 * (size * size) * c * c * 9; // 3x3 conv at the upsampled grid
    }
    let n = (cfg.dyn_grid * cfg.dyn_grid) as u64;
    flops += 2 * n * c * 3; // 1x1 head
    flops += 4 * n * 3; // anchors + tanh + scale
    flops
}

// ---- control track text format ----
//
// One frame per line: `alpha.total()` whitespace-separated floats (the full
// control vector, eye/mouth/expression/pose). Blank lines and lines starting
// with '#' are ignored.

pub fn parse_control_track(text: &str, alpha_total: usize) -> Result<Vec<Array1<f64>>> {
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tk| {
                tk.parse::<f64>()
                    .map_err(|_| Error::format(format!("track line {}: bad float {tk:?}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if vals.len() != alpha_total {
            return Err(Error::format(format!(
                "track line {}: expected {alpha_total} values, got {}",
                lineno + 1,
                vals.len()
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("track line {}: non-finite value", lineno + 1)));
        }
        frames.push(Array1::from(vals));
    }
    Ok(frames)
}

pub fn write_control_track(frames: &[Array1<f64>]) -> String {
    let mut out = String::from("# one frame per line: eye mouth expression pose blocks, concatenated\n");
    for f in frames {
        let line: Vec<String> = f.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
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
            ..Default::default()
        }
    }

    #[test]
    fn output_count_and_bounds() {
        let cfg = cfg();
        let mut store = WeightStore::new();
        init_reenact(&mut store, &cfg, 3);
        let mut tape = Tape::inference();
        let alpha = vec![0.2; cfg.alpha.drive_dims()];
        let pos = drive_positions(&mut tape, &store, &cfg, &alpha).unwrap();
        let p = tape.val2(pos);
        assert_eq!(p.nrows(), cfg.n_dyn());
        let semi = cfg.mesh.geometry.semi_axes;
        for row in p.rows() {
            for c in 0..3 {
                assert!(row[c].abs() < semi[c], "position outside head volume");
            }
        }
    }

    #[test]
    fn deterministic_and_alpha_sensitive() {
        let cfg = cfg();
        let mut store = WeightStore::new();
        init_reenact(&mut store, &cfg, 3);
        // Non-zero head so alpha actually flows through.
        weights::init_matrix(&mut store, 11, "reenact.head.w", 3, cfg.reenact_channels, 0.5);
        let run = |a: f64| {
            let mut tape = Tape::inference();
            let alpha = vec![a; cfg.alpha.drive_dims()];
            let pos = drive_positions(&mut tape, &store, &cfg, &alpha).unwrap();
            tape.val2(pos)
        };
        assert_eq!(run(0.3), run(0.3));
        let d: f64 = (run(0.3) - run(-0.3)).iter().map(|v| v.abs()).sum();
        assert!(d > 1e-9);
    }

    #[test]
    fn wrong_alpha_dimension_is_an_error() {
        let cfg = cfg();
        let mut store = WeightStore::new();
        init_reenact(&mut store, &cfg, 3);
        let mut tape = Tape::inference();
        assert!(drive_positions(&mut tape, &store, &cfg, &[0.0; 3]).is_err());
    }

    #[test]
    fn drive_flops_ignore_backbone_scale() {
        let base = cfg();
        let mut wide = cfg();
        wide.backbone.width *= 8;
        wide.backbone.depth += 4;
        assert_eq!(drive_flops(&base), drive_flops(&wide));
    }

    #[test]
    fn control_track_roundtrip_and_validation() {
        let frames = vec![
            Array1::from_shape_fn(26, |i| i as f64 * 0.01 - 0.1),
            Array1::from_shape_fn(26, |i| -(i as f64) * 0.02 + 0.3),
        ];
        let text = write_control_track(&frames);
        let back = parse_control_track(&text, 26).unwrap();
        assert_eq!(frames, back);

        assert!(parse_control_track("1 2 3\n", 26).is_err());
        assert!(parse_control_track("nan nan", 2).is_err());
        assert!(parse_control_track(&format!("{}\n", vec!["inf"; 26].join(" ")), 26).is_err());
        // Comments and blanks are fine.
        assert_eq!(parse_control_track("# hi\n\n", 26).unwrap().len(), 0);
    }
}
