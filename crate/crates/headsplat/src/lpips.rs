//! Perceptual distance from a fixed, seed-initialized, never-trained conv
//! feature stack: four strided stages, channel-normalized features, mean
//! squared feature difference averaged over stages. Deterministic across
//! builds and platforms; symmetric; zero iff the inputs agree (up to the
//! normalization epsilon).

use ndarray::{Array1, Array2};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::rng::{normal, substream};
use crate::tape::{Tape, Var};

/// Internal seed of the fixed feature stack. Changing it changes every
/// perceptual number in the repo, so it is a constant, not a config knob.
const LPIPS_SEED: u64 = 0x9e3779b97f4a7c15;
const CHANNELS: [usize; 5] = [3, 8, 16, 32, 64];
const NORM_EPS: f64 = 1e-10;

struct Stack {
    convs: Vec<(Array2<f64>, Array1<f64>)>,
}

fn stack() -> &'static Stack {
    static STACK: OnceLock<Stack> = OnceLock::new();
    STACK.get_or_init(|| {
        let mut convs = Vec::new();
        for s in 0..CHANNELS.len() - 1 {
            let (cin, cout) = (CHANNELS[s], CHANNELS[s + 1]);
            let mut rng = substream(LPIPS_SEED, &format!("lpips/conv{s}"));
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w = Array2::from_shape_fn((cout, cin * 9), |_| std * normal(&mut rng));
            let b = Array1::from_shape_fn(cout, |_| 0.1 * normal(&mut rng));
            convs.push((w, b));
        }
        Stack { convs }
    })
}

/// Channel-normalized features of each stage for an HxWx3 image value.
pub fn features(tape: &mut Tape, img: Var) -> Vec<Var> {
    let st = stack();
    let mut x = tape.hwc_to_chw(img);
    let mut feats = Vec::with_capacity(st.convs.len());
    for (w, b) in &st.convs {
        let wv = tape.constant2(w.clone());
        let bv = tape.constant1(b.clone());
        x = tape.conv2d(x, wv, bv, 3, 2, 1);
        x = tape.gelu(x);
        feats.push(tape.channel_l2norm(x, NORM_EPS));
    }
    feats
}

/// Perceptual distance between two images already on the tape.
pub fn distance_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.val(a).shape() != tape.val(b).shape() {
        return Err(Error::shape("perceptual distance needs equal shapes"));
    }
    let fa = features(tape, a);
    let fb = features(tape, b);
    distance_from_features(tape, &fa, &fb)
}

/// Distance given precomputed per-stage features (targets can be cached).
pub fn distance_from_features(tape: &mut Tape, fa: &[Var], fb: &[Var]) -> Result<Var> {
    if fa.len() != fb.len() || fa.is_empty() {
        return Err(Error::shape("feature stage mismatch"));
    }
    let mut acc: Option<Var> = None;
    for (a, b) in fa.iter().zip(fb.iter()) {
        let d = tape.sub(*a, *b);
        let sq = tape.square(d);
        let m = tape.mean_all(sq);
        acc = Some(match acc {
            None => m,
            Some(prev) => tape.add(prev, m),
        });
    }
    let total = acc.unwrap();
    Ok(tape.mul_scalar(total, 1.0 / fa.len() as f64))
}

/// Plain-image entry point.
pub fn perceptual_distance(a: &Image, b: &Image) -> Result<f64> {
    let mut tape = Tape::inference();
    let va = tape.constant3(a.data.clone());
    let vb = tape.constant3(b.data.clone());
    let d = distance_on_tape(&mut tape, va, vb)?;
    Ok(tape.scalar(d))
}

/// Pooled deepest-stage feature vector; the fixed identity embedding used by
/// the similarity proxy metrics.
pub fn identity_embedding(img: &Image) -> Vec<f64> {
    let mut tape = Tape::inference();
    let v = tape.constant3(img.data.clone());
    let feats = features(&mut tape, v);
    let deepest = *feats.last().unwrap();
    let pooled = tape.spatial_mean(deepest);
    tape.val(pooled).iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::Array3;
    use rand::Rng;

    fn random_image(seed: u64, res: usize) -> Image {
        let mut rng = substream(seed, "lpips-test");
        Image::new(Array3::from_shape_fn((res, res, 3), |_| rng.gen::<f64>())).unwrap()
    }

    #[test]
    fn zero_on_identical_and_symmetric() {
        let a = random_image(1, 32);
        let b = random_image(2, 32);
        assert_eq!(perceptual_distance(&a, &a).unwrap(), 0.0);
        let ab = perceptual_distance(&a, &b).unwrap();
        let ba = perceptual_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        assert!(ab > 0.0);
    }

    #[test]
    fn inversion_hurts_more_than_small_noise() {
        let a = random_image(3, 32);
        let inverted = Image::new(a.data.mapv(|v| 1.0 - v)).unwrap();
        let mut rng = substream(4, "lpips-noise");
        let noisy = Image::new(a.data.mapv(|v| (v + 0.01 * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0))).unwrap();
        let d_inv = perceptual_distance(&a, &inverted).unwrap();
        let d_noise = perceptual_distance(&a, &noisy).unwrap();
        assert!(d_inv > d_noise, "inversion {d_inv} should exceed noise {d_noise}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = random_image(5, 32);
        let b = random_image(6, 16);
        assert!(perceptual_distance(&a, &b).is_err());
    }

    #[test]
    fn deterministic_across_processial_runs() {
        // The stack is seed-pinned: the same images always give the same value.
        let a = random_image(7, 32);
        let b = random_image(8, 32);
        let d1 = perceptual_distance(&a, &b).unwrap();
        let d2 = perceptual_distance(&a, &b).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn identity_embedding_is_unit_free_and_stable() {
        let a = random_image(9, 32);
        let e1 = identity_embedding(&a);
        let e2 = identity_embedding(&a);
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 64);
    }
}
