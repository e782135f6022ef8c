//! The 3D Gaussian cloud value type, its activation-validating constructor,
//! concatenation of static and dynamic parts, and the flat binary container.
//!
//! Binary container layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"GSPLAT1\0"
//! 8       4     version (u32) = 1
//! 12      4     reserved = 0
//! 16      8     N (u64)
//! 24      ...   f32 blocks: positions Nx3, colors Nx3, opacities N,
//!               scales Nx3, rotations Nx4
//! ```

use ndarray::{concatenate, Array1, Array2, Axis};
use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const GAUSSIAN_MAGIC: &[u8; 8] = b"GSPLAT1\0";
pub const GAUSSIAN_VERSION: u32 = 1;
pub const QUAT_NORM_TOL: f64 = 1e-6;
pub const OPACITY_EPS: f64 = 1e-12;

/// A validated Gaussian cloud. All attribute arrays share leading dimension N;
/// opacities are strictly inside (0,1), scales strictly positive, quaternions
/// unit within [`QUAT_NORM_TOL`]. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub positions: Array2<f64>,
    pub colors: Array2<f64>,
    pub opacities: Array1<f64>,
    pub scales: Array2<f64>,
    pub rotations: Array2<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GaussianSet {
    /// Applies the attribute activations (sigmoid to opacities and colors,
    /// exp to scales, normalization to quaternions) and validates the result.
    pub fn from_raw(
        raw_positions: Array2<f64>,
        raw_colors: Array2<f64>,
        raw_opacities: Array1<f64>,
        raw_scales: Array2<f64>,
        raw_rotations: Array2<f64>,
    ) -> Result<Self> {
        let n = raw_positions.nrows();
        check_dims("positions", &raw_positions, n, 3)?;
        check_dims("colors", &raw_colors, n, 3)?;
        if raw_opacities.len() != n {
            return Err(Error::shape(format!("opacities len {} != N {n}", raw_opacities.len())));
        }
        check_dims("scales", &raw_scales, n, 3)?;
        check_dims("rotations", &raw_rotations, n, 4)?;
        for (name, arr) in [("positions", &raw_positions), ("colors", &raw_colors), ("scales", &raw_scales), ("rotations", &raw_rotations)] {
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("raw {name}")));
            }
        }
        if raw_opacities.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw opacities".into()));
        }

        let colors = raw_colors.mapv(sigmoid);
        // Sigmoid saturates to exactly 0/1 in f64 for |x| > ~36; pull the
        // activated opacity back inside the open interval the invariant needs.
        let opacities = raw_opacities.mapv(|x| sigmoid(x).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS));
        let scales = raw_scales.mapv(f64::exp);
        let mut rotations = raw_rotations;
        for mut q in rotations.rows_mut() {
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::format("zero quaternion cannot be normalized"));
            }
            q.mapv_inplace(|v| v / norm);
        }
        let set = Self { positions: raw_positions, colors, opacities, scales, rotations };
        set.validate()?;
        Ok(set)
    }

    /// Wraps already-activated attributes, validating the type invariants.
    pub fn from_activated(
        positions: Array2<f64>,
        colors: Array2<f64>,
        opacities: Array1<f64>,
        scales: Array2<f64>,
        rotations: Array2<f64>,
    ) -> Result<Self> {
        let set = Self { positions, colors, opacities, scales, rotations };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        check_dims("positions", &self.positions, n, 3)?;
        check_dims("colors", &self.colors, n, 3)?;
        if self.opacities.len() != n {
            return Err(Error::shape(format!("opacities len {} != N {n}", self.opacities.len())));
        }
        check_dims("scales", &self.scales, n, 3)?;
        check_dims("rotations", &self.rotations, n, 4)?;
        for v in self.positions.iter().chain(self.colors.iter()).chain(self.scales.iter()).chain(self.rotations.iter()).chain(self.opacities.iter()) {
            if !v.is_finite() {
                return Err(Error::NonFinite("gaussian set".into()));
            }
        }
        if self.opacities.iter().any(|&o| o <= 0.0 || o >= 1.0) {
            return Err(Error::format("opacity outside (0,1)"));
        }
        if self.colors.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::format("color outside [0,1]"));
        }
        if self.scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::format("non-positive scale"));
        }
        for q in self.rotations.rows() {
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > QUAT_NORM_TOL {
                return Err(Error::format(format!("quaternion norm {norm} not unit")));
            }
        }
        Ok(())
    }

    /// Serializes into the flat binary container.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(GAUSSIAN_MAGIC)?;
        w.write_all(&GAUSSIAN_VERSION.to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for block in [
            self.positions.as_slice().unwrap(),
            self.colors.as_slice().unwrap(),
        ] {
            write_f32_block(w, block)?;
        }
        write_f32_block(w, self.opacities.as_slice().unwrap())?;
        write_f32_block(w, self.scales.as_slice().unwrap())?;
        write_f32_block(w, self.rotations.as_slice().unwrap())?;
        Ok(())
    }

    /// Parses the flat binary container. Validates invariants on load so a
    /// corrupted file cannot produce an invalid set.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GAUSSIAN_MAGIC {
            return Err(Error::format("bad gaussian container magic"));
        }
        let version = read_u32(r)?;
        if version != GAUSSIAN_VERSION {
            return Err(Error::format(format!("unsupported gaussian container version {version}")));
        }
        let _reserved = read_u32(r)?;
        let n = read_u64(r)? as usize;
        // 16 MiB of payload is far beyond any desk-scale avatar; treat bigger
        // claims as corruption instead of attempting the allocation.
        if n > 1_000_000 {
            return Err(Error::format(format!("implausible gaussian count {n}")));
        }
        let positions = read_f32_matrix(r, n, 3)?;
        let colors = read_f32_matrix(r, n, 3)?;
        let opacities = Array1::from(read_f32_vec(r, n)?);
        let scales = read_f32_matrix(r, n, 3)?;
        let rotations = read_f32_matrix(r, n, 4)?;
        Self::from_activated(positions, colors, opacities, scales, rotations)
    }
}

/// Concatenates two Gaussian sets; `a`'s entries precede `b`'s, attributes are
/// copied unchanged.
pub fn concat_gaussians(a: &GaussianSet, b: &GaussianSet) -> GaussianSet {
    GaussianSet {
        positions: concatenate![Axis(0), a.positions, b.positions],
        colors: concatenate![Axis(0), a.colors, b.colors],
        opacities: concatenate![Axis(0), a.opacities, b.opacities],
        scales: concatenate![Axis(0), a.scales, b.scales],
        rotations: concatenate![Axis(0), a.rotations, b.rotations],
    }
}

fn check_dims(name: &str, arr: &Array2<f64>, n: usize, cols: usize) -> Result<()> {
    if arr.nrows() != n || arr.ncols() != cols {
        return Err(Error::shape(format!(
            "{name} is {}x{}, expected {n}x{cols}",
            arr.nrows(),
            arr.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn write_f32_block(w: &mut impl Write, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32_vec(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn read_f32_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let v = read_f32_vec(r, rows * cols)?;
    Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::shape(e.to_string()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Quantizes through f32 and back; serialization stores f32 blocks, so state
/// that should survive a round trip bit-exactly is snapped on construction.
pub fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn simple_raw(n: usize, seed: f64) -> GaussianSet {
        let positions = Array2::from_shape_fn((n, 3), |(i, j)| seed + i as f64 * 0.1 + j as f64);
        let colors = Array2::from_shape_fn((n, 3), |(i, j)| (i + j) as f64 * 0.3 - 1.0);
        let opacities = Array1::from_shape_fn(n, |i| i as f64 * 0.2 - 0.5);
        let scales = Array2::from_shape_fn((n, 3), |(i, _)| -2.0 + i as f64 * 0.01);
        let rotations = Array2::from_shape_fn((n, 4), |(i, j)| if j == 0 { 1.0 } else { 0.1 * i as f64 });
        GaussianSet::from_raw(positions, colors, opacities, scales, rotations).unwrap()
    }

    #[test]
    fn activations_match_closed_forms() {
        let set = GaussianSet::from_raw(
            array![[0.0, 0.0, 0.0]],
            array![[0.0, 0.0, 0.0]],
            array![0.0],
            array![[0.0, 0.0, 0.0]],
            array![[2.0, 0.0, 0.0, 0.0]],
        )
        .unwrap();
        assert_eq!(set.opacities[0], 0.5); // sigmoid(0)
        assert_eq!(set.scales[[0, 0]], 1.0); // exp(0)
        assert_eq!(set.rotations.row(0).to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let res = GaussianSet::from_raw(
            Array2::zeros((2, 3)),
            Array2::zeros((3, 3)),
            Array1::zeros(2),
            Array2::zeros((2, 3)),
            Array2::from_shape_fn((2, 4), |(_, j)| if j == 0 { 1.0 } else { 0.0 }),
        );
        assert!(res.is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut pos = Array2::zeros((1, 3));
        pos[[0, 1]] = f64::INFINITY;
        let res = GaussianSet::from_raw(
            pos,
            Array2::zeros((1, 3)),
            Array1::zeros(1),
            Array2::zeros((1, 3)),
            array![[1.0, 0.0, 0.0, 0.0]],
        );
        assert!(res.is_err());
    }

    #[test]
    fn concat_sizes_and_slices() {
        let a = simple_raw(5, 0.0);
        let b = simple_raw(7, 3.0);
        let c = concat_gaussians(&a, &b);
        assert_eq!(c.len(), 12);
        assert_eq!(c.positions.slice(ndarray::s![..5, ..]), a.positions);
        assert_eq!(c.positions.slice(ndarray::s![5.., ..]), b.positions);
        assert_eq!(c.opacities.slice(ndarray::s![5..]), b.opacities);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let a = simple_raw(4, 1.0);
        let empty = GaussianSet {
            positions: Array2::zeros((0, 3)),
            colors: Array2::zeros((0, 3)),
            opacities: Array1::zeros(0),
            scales: Array2::zeros((0, 3)),
            rotations: Array2::zeros((0, 4)),
        };
        let c = concat_gaussians(&a, &empty);
        assert_eq!(c, a);
    }

    #[test]
    fn concat_is_associative() {
        let a = simple_raw(2, 0.0);
        let b = simple_raw(3, 1.0);
        let c = simple_raw(4, 2.0);
        let left = concat_gaussians(&concat_gaussians(&a, &b), &c);
        let right = concat_gaussians(&a, &concat_gaussians(&b, &c));
        assert_eq!(left, right);
    }

    #[test]
    fn container_rejects_garbage() {
        let mut bytes = vec![0u8; 64];
        assert!(GaussianSet::read_from(&mut bytes.as_slice()).is_err());
        bytes[..8].copy_from_slice(GAUSSIAN_MAGIC);
        bytes[8] = 99; // bad version
        assert!(GaussianSet::read_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn container_roundtrip_after_f32_snap() {
        let mut set = simple_raw(9, 0.5);
        for arr in [&mut set.positions, &mut set.colors, &mut set.scales, &mut set.rotations] {
            arr.mapv_inplace(snap_f32);
        }
        set.opacities.mapv_inplace(snap_f32);
        // Re-normalize snapped quaternions within tolerance is unnecessary:
        // the snap error is ~1e-8, inside QUAT_NORM_TOL.
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = GaussianSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(set, back);
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    proptest! {
        #[test]
        fn constructor_establishes_invariants(
            n in 1usize..12,
            seed in proptest::collection::vec(-50.0f64..50.0, 14 * 12),
        ) {
            let take = |k: usize, off: usize| seed[off * 12 + k % (12 * 14 - off * 12)];
            let positions = Array2::from_shape_fn((n, 3), |(i, j)| take(i * 3 + j, 0));
            let colors = Array2::from_shape_fn((n, 3), |(i, j)| take(i * 3 + j, 3));
            let opacities = Array1::from_shape_fn(n, |i| take(i, 6));
            let scales = Array2::from_shape_fn((n, 3), |(i, j)| take(i * 3 + j, 7).clamp(-6.0, 3.0));
            let rotations = Array2::from_shape_fn((n, 4), |(i, j)| {
                let v = take(i * 4 + j, 10);
                if v.abs() < 1e-3 { 1.0 } else { v }
            });
            let set = GaussianSet::from_raw(positions, colors, opacities, scales, rotations).unwrap();
            set.validate().unwrap();
        }
    }
}
