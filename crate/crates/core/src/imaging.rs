//! Float RGB images and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Interleaved RGB image with real-valued samples, nominally in `[0,255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {width}×{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn map_pixels(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let data = self.pixels().flat_map(&mut f).collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn clamped(&self) -> Self {
        self.map_pixels(|p| p.map(|v| v.clamp(0.0, 255.0)))
    }

    /// Largest per-sample absolute difference.
    pub fn max_abs_diff(&self, other: &ColorImage) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Luminance `0.299R + 0.587G + 0.114B`, row-major.
    pub fn grayscale(&self) -> Vec<f64> {
        self.pixels()
            .map(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for p in self.pixels() {
            for c in 0..3 {
                m[c] += p[c];
            }
        }
        m.map(|v| v / self.pixel_count() as f64)
    }

    /// Quantized to 8 bits with rounding and clipping.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f64).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Centre crop to `w×h`; `None` if the image is smaller.
    pub fn center_crop(&self, w: usize, h: usize) -> Option<Self> {
        if w > self.width || h > self.height {
            return None;
        }
        Some(self.crop((self.width - w) / 2, (self.height - h) / 2, w, h))
    }

    /// The `w×h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        assert!(
            x0 + w <= self.width && y0 + h <= self.height,
            "crop outside image"
        );
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    /// Reflect-pads the right and bottom edges to `w×h`.
    pub fn reflect_pad(&self, w: usize, h: usize) -> Self {
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                data.extend(self.pixel(reflect(x, self.width), reflect(y, self.height)));
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    /// `1×3×H×W` tensor with samples mapped by `v ↦ v·scale + shift`.
    pub fn to_tensor<T: Real>(&self, scale: f64, shift: f64) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let mut t = Tensor::zeros([1, 3, h, w]);
        for (i, p) in self.pixels().enumerate() {
            for (c, v) in p.into_iter().enumerate() {
                t.data_mut()[c * w * h + i] = T::lit(v * scale + shift);
            }
        }
        t
    }

    /// Image `n` of a tensor batch, samples mapped by `v ↦ v·scale + shift`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize, scale: f64, shift: f64) -> Self {
        let [_, c, h, w] = t.shape();
        assert_eq!(c, 3, "RGB tensor expected");
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data.push(t.at(n, ch, y, x).to_f64().unwrap() * scale + shift);
                }
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    /// `[0,255] → [−1,1]`.
    pub fn to_symmetric<T: Real>(&self) -> Tensor<T> {
        self.to_tensor(2.0 / 255.0, -1.0)
    }

    /// `[−1,1] → [0,255]`.
    pub fn from_symmetric<T: Real>(t: &Tensor<T>, n: usize) -> Self {
        Self::from_tensor(t, n, 127.5, 127.5)
    }
}

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} mask entries for {width}×{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Luminance above 127 counts as foreground.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let data = img.as_raw().iter().map(|&v| v > 127).collect();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn center_crop(&self, w: usize, h: usize) -> Option<Self> {
        if w > self.width || h > self.height {
            return None;
        }
        let (x0, y0) = ((self.width - w) / 2, (self.height - h) / 2);
        let data = (y0..y0 + h)
            .flat_map(|y| {
                self.data[y * self.width + x0..y * self.width + x0 + w]
                    .iter()
                    .copied()
            })
            .collect();
        Some(Self {
            width: w,
            height: h,
            data,
        })
    }

    /// `1×1×H×W` tensor of `0/1` values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Tensor::from_vec([1, 1, self.height, self.width], data).expect("mask shape")
    }

    /// Plane `n` of a `N×1×H×W` tensor, thresholded at 0.5.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Self {
        let [_, _, h, w] = t.shape();
        let half = T::lit(0.5);
        let data = t.data()[n * h * w..(n + 1) * h * w]
            .iter()
            .map(|&v| v > half)
            .collect();
        Self {
            width: w,
            height: h,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_roundtrip() {
        let img = ColorImage::new(2, 1, vec![0.0, 127.5, 255.0, 10.0, 20.0, 30.0]).unwrap();
        let t: Tensor<f64> = img.to_symmetric();
        assert_eq!(t.at(0, 0, 0, 0), -1.0);
        assert_eq!(t.at(0, 2, 0, 0), 1.0);
        assert!(ColorImage::from_symmetric(&t, 0).max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn crop_and_pad() {
        let data: Vec<f64> = (0..4 * 3 * 3).map(|v| v as f64).collect();
        let img = ColorImage::new(4, 3, data).unwrap();
        let c = img.center_crop(2, 1).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(1, 1));
        assert!(img.center_crop(5, 1).is_none());
        let p = img.reflect_pad(6, 4);
        assert_eq!(p.pixel(4, 0), img.pixel(2, 0));
        assert_eq!(p.pixel(5, 3), img.pixel(1, 1));
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ColorImage::new(2, 2, (0..12).map(|v| (v * 20) as f64).collect()).unwrap();
        let path = dir.path().join("x.png");
        img.save(&path).unwrap();
        assert_eq!(ColorImage::load(&path).unwrap(), img);
        let m = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        m.save(&dir.path().join("m.png")).unwrap();
        assert_eq!(Mask::load(&dir.path().join("m.png")).unwrap(), m);
    }
}
