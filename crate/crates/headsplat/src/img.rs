//! RGB image values in [0,1], stored HxWx3, plus 8-bit PNG export with
//! round-half-to-even quantization.

use ndarray::{s, Array3};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    /// Wraps an HxWx3 array, clipping to [0,1]. Non-finite input is an error.
    pub fn new(mut data: Array3<f64>) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(Error::shape(format!("image last dim must be 3, got {}", data.shape()[2])));
        }
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(Error::NonFinite("image".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { data })
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Array3::zeros((height, width, 3));
        for c in 0..3 {
            data.slice_mut(s![.., .., c]).fill(rgb[c].clamp(0.0, 1.0));
        }
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    /// Mean absolute pixel difference.
    pub fn l1(&self, other: &Image) -> Result<f64> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::shape("image shapes differ"));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    /// Crop by pixel box, clamped to bounds. Returns an empty error only if the
    /// clamped box is degenerate.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Image> {
        let x1 = x1.min(self.width());
        let y1 = y1.min(self.height());
        let x0 = x0.min(x1);
        let y0 = y0.min(y1);
        if x1 - x0 == 0 || y1 - y0 == 0 {
            return Err(Error::shape("degenerate crop"));
        }
        Ok(Image { data: self.data.slice(s![y0..y1, x0..x1, ..]).to_owned() })
    }

    /// 8-bit quantization: scale by 255, round half to even.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round_ties_even().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = self.to_rgb8();
        image::save_buffer(
            path,
            &buf,
            self.width() as u32,
            self.height() as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Image(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((h, w, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
            }
        }
        Ok(Image { data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_to_even() {
        // 0.5/255 scales to exactly 0.5 -> rounds to 0 (even); 1.5/255 -> 2.
        let mut data = Array3::zeros((1, 2, 3));
        data[[0, 0, 0]] = 0.5 / 255.0;
        data[[0, 1, 0]] = 1.5 / 255.0;
        let img = Image::new(data).unwrap();
        let bytes = img.to_rgb8();
        assert_eq!(bytes[0], 0);
        assert_eq!(bytes[3], 2);
    }

    #[test]
    fn values_clip_to_unit_range() {
        let mut data = Array3::zeros((1, 1, 3));
        data[[0, 0, 0]] = 1.7;
        data[[0, 0, 1]] = -0.3;
        let img = Image::new(data).unwrap();
        assert_eq!(img.data[[0, 0, 0]], 1.0);
        assert_eq!(img.data[[0, 0, 1]], 0.0);
    }

    #[test]
    fn nan_rejected() {
        let mut data = Array3::zeros((1, 1, 3));
        data[[0, 0, 2]] = f64::NAN;
        assert!(Image::new(data).is_err());
    }

    #[test]
    fn png_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut data = Array3::zeros((5, 4, 3));
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        let img = Image::new(data).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(img.data, back.data);
    }
}
