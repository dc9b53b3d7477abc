//! Dense float images, pinhole intrinsics and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Row-major interleaved float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "image shapes differ: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Extract one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }
}

/// Load an 8-bit RGB PNG as a 3-channel image in `[0, 1]`.
pub fn load_rgb_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Image::new(w as usize, h as usize, 3);
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out.data[i * 3 + c] = px[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_rgb_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::invalid("RGB export needs a 3-channel image"));
    }
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(img.width as u32, img.height as u32, |x, y| {
        let px = |c| (img.get(x as usize, y as usize, c).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}

/// Load a 16-bit depth PNG; each raw unit is `depth_scale` meters.
pub fn load_depth_png(path: &Path, depth_scale: f64) -> Result<Image> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let mut out = Image::new(w as usize, h as usize, 1);
    for (i, px) in img.pixels().enumerate() {
        out.data[i] = px[0] as f64 * depth_scale;
    }
    Ok(out)
}

pub fn save_depth_png(path: &Path, depth: &Image, depth_scale: f64) -> Result<()> {
    if depth.channels != 1 {
        return Err(Error::invalid("depth export needs a single-channel image"));
    }
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(depth.width as u32, depth.height as u32, |x, y| {
        let raw = (depth.get(x as usize, y as usize, 0) / depth_scale).round();
        Luma([raw.clamp(0.0, u16::MAX as f64) as u16])
    });
    buf.save(path)?;
    Ok(())
}

/// Pinhole intrinsics; pixel `(u, v)` has its centre at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("intrinsics need fx, fy > 0 and a non-empty image"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Image::from_fn(7, 5, 3, |x, y, c| ((x + 2 * y + c) % 11) as f64 / 10.0);
        let p = dir.path().join("c.png");
        save_rgb_png(&p, &rgb).unwrap();
        let back = load_rgb_png(&p).unwrap();
        assert!(back.same_shape(&rgb));
        for (a, b) in rgb.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let depth = Image::from_fn(7, 5, 1, |x, y, _| 0.5 + 0.0137 * (x * y) as f64);
        let p = dir.path().join("d.png");
        save_depth_png(&p, &depth, 0.001).unwrap();
        let back = load_depth_png(&p, 0.001).unwrap();
        for (a, b) in depth.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.0005 + 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Image::new(4, 4, 3);
        let b = Image::new(4, 5, 3);
        assert!(a.ensure_same_shape(&b).is_err());
    }
}
