//! Training losses: perceptual + L1 for global pretraining, plus the
//! landmark-cropped eye/mouth perceptual term used when finetuning the
//! restorer. Crop boxes come from landmark hulls with a 4 px margin, clamped
//! to the frame.

use ndarray::Array2;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::lpips;
use crate::tape::{Tape, Var};

pub const CROP_MARGIN: usize = 4;

/// Pixel box (x0, y0, x1, y1), half-open, clamped to the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

/// Bounding box of a landmark subset with margin, clamped to resolution.
/// Returns at least a 1x1 box as long as any landmark is inside the frame.
pub fn landmark_box(landmarks: &Array2<f64>, subset: &[usize], res: (usize, usize)) -> PixelBox {
    let (w, h) = res;
    let mut x0 = f64::INFINITY;
    let mut y0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for &i in subset {
        x0 = x0.min(landmarks[[i, 0]]);
        x1 = x1.max(landmarks[[i, 0]]);
        y0 = y0.min(landmarks[[i, 1]]);
        y1 = y1.max(landmarks[[i, 1]]);
    }
    let m = CROP_MARGIN as f64;
    let x0 = ((x0 - m).floor().max(0.0) as usize).min(w - 1);
    let y0 = ((y0 - m).floor().max(0.0) as usize).min(h - 1);
    let x1 = ((x1 + m).ceil().max(0.0) as usize).clamp(x0 + 1, w);
    let y1 = ((y1 + m).ceil().max(0.0) as usize).clamp(y0 + 1, h);
    PixelBox { x0, y0, x1, y1 }
}

/// The three supervision regions: left eye, right eye, mouth.
/// Landmark layout: 0..6 eyes (outer L, inner L, center L, inner R, outer R,
/// center R), 6..9 mouth (corner L, corner R, center), 9 nose tip.
pub const LEFT_EYE_LM: [usize; 3] = [0, 1, 2];
pub const RIGHT_EYE_LM: [usize; 3] = [3, 4, 5];
pub const MOUTH_LM: [usize; 3] = [6, 7, 8];

pub fn region_boxes(landmarks: &Array2<f64>, res: (usize, usize)) -> [PixelBox; 3] {
    [
        landmark_box(landmarks, &LEFT_EYE_LM, res),
        landmark_box(landmarks, &RIGHT_EYE_LM, res),
        landmark_box(landmarks, &MOUTH_LM, res),
    ]
}

fn crop_var(tape: &mut Tape, img: Var, b: &PixelBox) -> Var {
    let rows = tape.slice_axis(img, 0, b.y0, b.height());
    tape.slice_axis(rows, 1, b.x0, b.width())
}

/// Perceptual + L1: `lambda_perceptual * d_feat + lambda_l1 * mean|a-b|`.
/// Returns (total, l1 term, perceptual term) unweighted components.
pub fn pretrain_loss_on_tape(
    tape: &mut Tape,
    cfg: &TrainConfig,
    pred: Var,
    target: Var,
) -> Result<(Var, Var, Var)> {
    if tape.val(pred).shape() != tape.val(target).shape() {
        return Err(Error::shape("loss needs equal image shapes"));
    }
    let diff = tape.sub(pred, target);
    let l1 = tape.abs(diff);
    let l1 = tape.mean_all(l1);
    let perc = lpips::distance_on_tape(tape, pred, target)?;
    let wl1 = tape.mul_scalar(l1, cfg.lambda_l1);
    let wp = tape.mul_scalar(perc, cfg.lambda_perceptual);
    let total = tape.add(wl1, wp);
    Ok((total, l1, perc))
}

/// Sum of per-region perceptual distances over the eye and mouth crops.
pub fn region_loss_on_tape(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    landmarks: &Array2<f64>,
) -> Result<Var> {
    let shape = tape.val(pred).shape().to_vec();
    let res = (shape[1], shape[0]);
    let boxes = region_boxes(landmarks, res);
    let mut acc: Option<Var> = None;
    for b in &boxes {
        let cp = crop_var(tape, pred, b);
        let ct = crop_var(tape, target, b);
        let d = lpips::distance_on_tape(tape, cp, ct)?;
        acc = Some(match acc {
            None => d,
            Some(prev) => tape.add(prev, d),
        });
    }
    Ok(acc.unwrap())
}

/// Stage-2 loss: pretrain terms plus `lambda_region` times the region term.
pub fn finetune_loss_on_tape(
    tape: &mut Tape,
    cfg: &TrainConfig,
    pred: Var,
    target: Var,
    landmarks: &Array2<f64>,
) -> Result<(Var, Var, Var, Var)> {
    let (pre, l1, perc) = pretrain_loss_on_tape(tape, cfg, pred, target)?;
    let region = region_loss_on_tape(tape, pred, target, landmarks)?;
    let wr = tape.mul_scalar(region, cfg.lambda_region);
    let total = tape.add(pre, wr);
    Ok((total, l1, perc, region))
}

// ---- plain-image versions for evaluation ----

pub fn pretrain_loss(cfg: &TrainConfig, pred: &Image, target: &Image) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = tape.constant3(pred.data.clone());
    let t = tape.constant3(target.data.clone());
    let (total, _, _) = pretrain_loss_on_tape(&mut tape, cfg, p, t)?;
    Ok(tape.scalar(total))
}

pub fn region_loss(pred: &Image, target: &Image, landmarks: &Array2<f64>) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = tape.constant3(pred.data.clone());
    let t = tape.constant3(target.data.clone());
    let v = region_loss_on_tape(&mut tape, p, t, landmarks)?;
    Ok(tape.scalar(v))
}

pub fn finetune_loss(cfg: &TrainConfig, pred: &Image, target: &Image, landmarks: &Array2<f64>) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = tape.constant3(pred.data.clone());
    let t = tape.constant3(target.data.clone());
    let (total, _, _, _) = finetune_loss_on_tape(&mut tape, cfg, p, t, landmarks)?;
    Ok(tape.scalar(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::{arr2, Array3};
    use rand::Rng;

    fn random_image(seed: u64, res: usize) -> Image {
        let mut rng = substream(seed, "loss-test");
        Image::new(Array3::from_shape_fn((res, res, 3), |_| rng.gen::<f64>())).unwrap()
    }

    fn landmarks() -> Array2<f64> {
        // Eyes around (20,24)/(44,24), mouth around (32,46), nose (32,34).
        arr2(&[
            [14.0, 24.0],
            [26.0, 24.0],
            [20.0, 24.0],
            [38.0, 24.0],
            [50.0, 24.0],
            [44.0, 24.0],
            [24.0, 46.0],
            [40.0, 46.0],
            [32.0, 46.0],
            [32.0, 34.0],
        ])
    }

    #[test]
    fn identical_images_give_zero_losses() {
        let cfg = TrainConfig::default();
        let a = random_image(1, 64);
        assert_eq!(pretrain_loss(&cfg, &a, &a).unwrap(), 0.0);
        assert_eq!(region_loss(&a, &a, &landmarks()).unwrap(), 0.0);
        assert_eq!(finetune_loss(&cfg, &a, &a, &landmarks()).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_matches_closed_form_l1_term() {
        let cfg = TrainConfig::default();
        let a = random_image(2, 32);
        let b = Image { data: a.data.mapv(|v| (v * 0.8) + 0.1) };
        // componentwise |a-b| = |0.2 v - 0.1|; just check total = l1*λ2 + perc*λ1.
        let mut tape = Tape::inference();
        let pa = tape.constant3(a.data.clone());
        let pb = tape.constant3(b.data.clone());
        let (total, l1, perc) = pretrain_loss_on_tape(&mut tape, &cfg, pa, pb).unwrap();
        let expect = cfg.lambda_l1 * tape.scalar(l1) + cfg.lambda_perceptual * tape.scalar(perc);
        assert!((tape.scalar(total) - expect).abs() < 1e-15);
        assert!(tape.scalar(l1) > 0.0);
    }

    #[test]
    fn mouth_perturbation_leaves_eye_term_at_zero() {
        let a = random_image(3, 64);
        let lm = landmarks();
        let boxes = region_boxes(&lm, (64, 64));
        let mouth = boxes[2];
        let mut b = a.clone();
        for y in mouth.y0..mouth.y1 {
            for x in mouth.x0..mouth.x1 {
                b.data[[y, x, 0]] = 1.0 - b.data[[y, x, 0]];
            }
        }
        // Eye crops identical => their perceptual terms are exactly zero, so
        // the region sum equals the mouth-only term.
        let mut tape = Tape::inference();
        let pa = tape.constant3(a.data.clone());
        let pb = tape.constant3(b.data.clone());
        let eye_l = crop_var(&mut tape, pa, &boxes[0]);
        let eye_l2 = crop_var(&mut tape, pb, &boxes[0]);
        let d_eye = lpips::distance_on_tape(&mut tape, eye_l, eye_l2).unwrap();
        assert_eq!(tape.scalar(d_eye), 0.0);
        let total = region_loss(&a, &b, &lm).unwrap();
        assert!(total > 0.0);
    }

    #[test]
    fn crops_clamp_at_frame_edges() {
        let lm = arr2(&[
            [1.0, 1.0],
            [3.0, 1.0],
            [2.0, 1.0],
            [60.0, 1.0],
            [63.0, 1.0],
            [62.0, 1.0],
            [2.0, 63.0],
            [62.0, 63.0],
            [32.0, 63.5],
            [32.0, 32.0],
        ]);
        let a = random_image(4, 64);
        let b = random_image(5, 64);
        // Must not panic; boxes clamp to the frame.
        let v = region_loss(&a, &b, &lm).unwrap();
        assert!(v.is_finite() && v > 0.0);
        for bx in region_boxes(&lm, (64, 64)) {
            assert!(bx.x1 <= 64 && bx.y1 <= 64);
            assert!(bx.width() >= 1 && bx.height() >= 1);
        }
    }

    #[test]
    fn doubling_lambda_region_doubles_its_contribution() {
        let cfg1 = TrainConfig::default();
        let mut cfg2 = TrainConfig::default();
        cfg2.lambda_region *= 2.0;
        let a = random_image(6, 64);
        let b = random_image(7, 64);
        let lm = landmarks();
        let pre = pretrain_loss(&cfg1, &a, &b).unwrap();
        let f1 = finetune_loss(&cfg1, &a, &b, &lm).unwrap();
        let f2 = finetune_loss(&cfg2, &a, &b, &lm).unwrap();
        let r1 = f1 - pre;
        let r2 = f2 - pre;
        assert!((r2 - 2.0 * r1).abs() < 1e-12);
        assert!(r1 > 0.0);
    }
}
