//! Linear RGB float images and their 8-bit PNG storage.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::create_parent;

pub type Rgb = [f64; 3];

/// Row-major RGB raster with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl RgbImage {
    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![color; width as usize * height as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch {
                expected: width as usize * height as usize,
                actual: pixels.len(),
            });
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, color: Rgb) {
        let i = self.index(x, y);
        self.pixels[i] = color;
    }

    /// Sets the pixel nearest to `(x, y)` if it lies inside the image.
    pub fn plot(&mut self, x: f64, y: f64, color: Rgb) {
        let (px, py) = (x.round(), y.round());
        if px >= 0.0 && py >= 0.0 && px < self.width as f64 && py < self.height as f64 {
            self.set(px as u32, py as u32, color);
        }
    }

    /// Fills every pixel whose center lies within `radius` of `(cx, cy)`.
    pub fn fill_disc(&mut self, cx: f64, cy: f64, radius: f64, color: Rgb) {
        let y0 = (cy - radius).ceil().max(0.0) as i64;
        let y1 = (cy + radius).floor().min(self.height as f64 - 1.0) as i64;
        let x0 = (cx - radius).ceil().max(0.0) as i64;
        let x1 = (cx + radius).floor().min(self.width as f64 - 1.0) as i64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= radius * radius {
                    self.set(x as u32, y as u32, color);
                }
            }
        }
    }

    /// One-pixel line from `a` to `b`, clipped to the image.
    pub fn draw_segment(&mut self, a: [f64; 2], b: [f64; 2], color: Rgb) {
        let steps = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0);
        if !steps.is_finite() {
            return;
        }
        for i in 0..=steps as u64 {
            let t = i as f64 / steps;
            self.plot(a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, color);
        }
    }

    fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    /// Snaps every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let pixels = self.pixels.iter().map(|p| p.map(|c| to_u8(c) as f64 / 255.0)).collect();
        RgbImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    pub fn has_non_finite(&self) -> bool {
        self.pixels.iter().flatten().any(|c| !c.is_finite())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut buf = Vec::with_capacity(self.pixels.len() * 3);
        for p in &self.pixels {
            buf.extend(p.iter().map(|&c| to_u8(c)));
        }
        image::RgbImage::from_raw(self.width, self.height, buf).expect("buffer sized from dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let pixels = img.pixels().map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
        RgbImage {
            width: img.width(),
            height: img.height(),
            pixels,
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        create_parent(path)?;
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let pixels = (0..12).map(|i| [i as f64 / 11.0, 0.3, 1.0 - i as f64 / 11.0]).collect();
        let img = RgbImage::from_pixels(4, 3, pixels).unwrap().quantized();
        img.save_png(&path).unwrap();
        assert_eq!(RgbImage::load_png(&path).unwrap(), img);
    }

    #[test]
    fn wrong_buffer_length() {
        assert!(RgbImage::from_pixels(2, 2, vec![[0.0; 3]; 3]).is_err());
    }
}
