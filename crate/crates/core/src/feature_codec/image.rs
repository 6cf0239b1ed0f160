use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use spast_tensor::Tensor;

use crate::error::{Result, SpastError};

/// RGB raster `3×H×W` with values in `[0, 1]` and sides that are multiples of 8.
#[derive(Clone, Debug)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(data: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(SpastError::Shape(format!(
                "{} values cannot fill a 3×{height}×{width} image",
                data.len()
            )));
        }
        Self::from_tensor(&Tensor::from_vec(data, &[3, height, width]))
    }

    /// Validates an existing tensor; the result carries no autodiff history.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, h, w] = t.shape() else {
            return Err(SpastError::Shape(format!("image must be 3×H×W, got {:?}", t.shape())));
        };
        if *c != 3 {
            return Err(SpastError::Shape(format!("image must have 3 channels, got {c}")));
        }
        if *h == 0 || *w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(SpastError::Shape(format!("image sides must be positive multiples of 8, got {h}×{w}")));
        }
        if !t.all_finite() {
            return Err(SpastError::InvalidImage("non-finite pixel value".into()));
        }
        if t.min_value() < 0.0 || t.max_value() > 1.0 {
            return Err(SpastError::InvalidImage(format!(
                "pixel range [{}, {}] outside [0, 1]",
                t.min_value(),
                t.max_value()
            )));
        }
        Ok(ImageTensor { tensor: t.detach() })
    }

    /// Clamps into `[0, 1]` (non-finite values become 0) before validating.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        let data = t
            .data()
            .iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Self::from_tensor(&Tensor::from_vec(data, t.shape()))
    }

    pub fn height(&self) -> usize {
        self.tensor.dim(1)
    }

    pub fn width(&self) -> usize {
        self.tensor.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    /// Bilinear resize to `height×width`.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        Self::from_tensor_clamped(&self.tensor.resize_bilinear(height, width))
    }

    /// Square `size×size` window with its top-left corner at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Self> {
        if top + size > self.height() || left + size > self.width() {
            return Err(SpastError::Shape(format!(
                "crop {size}×{size} at ({top},{left}) exceeds {}×{}",
                self.height(),
                self.width()
            )));
        }
        Self::from_tensor(&self.tensor.narrow(1, top, size).narrow(2, left, size))
    }

    /// Reads an 8-bit PNG or JPEG. Sides must already be multiples of 8.
    pub fn load(path: &Path) -> Result<Self> {
        let (data, h, w) = read_rgb(path)?;
        Self::new(data, h, w).map_err(|e| SpastError::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Reads an 8-bit PNG or JPEG of any size and resizes it.
    pub fn load_resized(path: &Path, height: usize, width: usize) -> Result<Self> {
        let (data, h, w) = read_rgb(path)?;
        let t = Tensor::from_vec(data, &[3, h, w]).resize_bilinear(height, width);
        Self::from_tensor_clamped(&t)
    }

    /// Writes an 8-bit RGB image; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let d = self.data();
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            let q = |c: usize| (d[c * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([q(0), q(1), q(2)])
        });
        img.save(path).map_err(|e| SpastError::Io(std::io::Error::other(e)))
    }

    /// Peak signal-to-noise ratio in dB against `other`, peak value 1.
    pub fn psnr(&self, other: &ImageTensor) -> Result<f64> {
        if self.tensor.shape() != other.tensor.shape() {
            return Err(SpastError::Shape(format!(
                "psnr between {:?} and {:?}",
                self.tensor.shape(),
                other.tensor.shape()
            )));
        }
        let n = self.data().len() as f64;
        let mse = self.data().iter().zip(other.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
    }
}

fn read_rgb(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| SpastError::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok((data, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_ranges() {
        assert!(matches!(ImageTensor::new(vec![0.5; 3 * 10 * 8], 10, 8), Err(SpastError::Shape(_))));
        assert!(matches!(ImageTensor::new(vec![1.5; 3 * 8 * 8], 8, 8), Err(SpastError::InvalidImage(_))));
        assert!(matches!(ImageTensor::new(vec![f64::NAN; 3 * 8 * 8], 8, 8), Err(SpastError::InvalidImage(_))));
        assert!(ImageTensor::new(vec![0.0; 3 * 8 * 16], 8, 16).is_ok());
    }

    #[test]
    fn png_round_trip_quantises_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f64> = (0..3 * 8 * 8).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = ImageTensor::new(data.clone(), 8, 8).unwrap();
        img.save(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        for (a, b) in back.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(img.psnr(&back).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_of_known_error() {
        let a = ImageTensor::new(vec![0.5; 3 * 8 * 8], 8, 8).unwrap();
        let b = ImageTensor::new(vec![0.6; 3 * 8 * 8], 8, 8).unwrap();
        assert!((a.psnr(&b).unwrap() - 20.0).abs() < 1e-9);
    }
}
