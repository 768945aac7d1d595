//! Fixed-size RGB raster, channel-planar, values in `[0, 1]`.

use std::io::Cursor;

use image::{imageops::FilterType, ImageFormat, RgbImage};

use crate::error::{contract, Error, Result};
use crate::IMAGE_SIZE;

pub const PLANE: usize = IMAGE_SIZE * IMAGE_SIZE;
pub const PIXELS: usize = 3 * PLANE;

/// Channel-planar (`c * 64 * 64 + y * 64 + x`) image.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    pub pixels: Vec<f64>,
}

impl FaceImage {
    pub fn zeros() -> Self {
        Self { pixels: vec![0.0; PIXELS] }
    }

    pub fn filled(v: f64) -> Self {
        Self { pixels: vec![v; PIXELS] }
    }

    pub fn from_pixels(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(contract(format!("image needs {PIXELS} values, got {}", pixels.len())));
        }
        Ok(Self { pixels })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[c * PLANE + y * IMAGE_SIZE + x]
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    /// 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> RgbImage {
        let mut img = RgbImage::new(IMAGE_SIZE as u32, IMAGE_SIZE as u32);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let px = [0, 1, 2].map(|c| (self.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let img = if img.width() as usize != IMAGE_SIZE || img.height() as usize != IMAGE_SIZE {
            image::imageops::resize(img, IMAGE_SIZE as u32, IMAGE_SIZE as u32, FilterType::Triangle)
        } else {
            img.clone()
        };
        let mut out = Self::zeros();
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.pixels[c * PLANE + y as usize * IMAGE_SIZE + x as usize] = p.0[c] as f64 / 255.0;
            }
        }
        out
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png).expect("in-memory png encode");
        buf.into_inner()
    }

    /// Decodes any format the `image` crate reads (PNG here), resizing to 64x64.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes())?;
        Ok(())
    }

    pub fn load_png(path: &std::path::Path) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    /// Quantizes through 8 bits, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        Self { pixels: self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let mut img = FaceImage::zeros();
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = (i % 97) as f64 / 96.0;
        }
        let back = FaceImage::from_png_bytes(&img.to_png_bytes()).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(FaceImage::from_pixels(vec![0.0; 10]).is_err());
    }
}
