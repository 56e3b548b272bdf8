//! RGB images with channel values in `[0, 1]`.

use crate::error::{Result, UliError};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn hflip(&self) -> Image {
        let mut out = Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Box-filter downscale by an integer factor, or bilinear resize otherwise.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        if self.width.is_multiple_of(width) && self.height.is_multiple_of(height) && self.width / width == self.height / height {
            let f = self.width / width;
            let mut out = Image::new(width, height);
            let norm = 1.0 / (f * f) as f32;
            for y in 0..height {
                for x in 0..width {
                    let mut acc = [0.0f32; 3];
                    for dy in 0..f {
                        for dx in 0..f {
                            let p = self.pixel(x * f + dx, y * f + dy);
                            for c in 0..3 {
                                acc[c] += p[c];
                            }
                        }
                    }
                    out.set_pixel(x, y, acc.map(|v| v * norm));
                }
            }
            return out;
        }
        let mut out = Image::new(width, height);
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for y in 0..height {
            for x in 0..width {
                let u = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let v = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
                let (x0, y0) = (u.floor() as usize, v.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
                let (fx, fy) = (u - x0 as f32, v - y0 as f32);
                let mut px = [0.0f32; 3];
                for (c, o) in px.iter_mut().enumerate() {
                    let a = self.pixel(x0, y0)[c] * (1.0 - fx) + self.pixel(x1, y0)[c] * fx;
                    let b = self.pixel(x0, y1)[c] * (1.0 - fx) + self.pixel(x1, y1)[c] * fx;
                    *o = a * (1.0 - fy) + b * fy;
                }
                out.set_pixel(x, y, px);
            }
        }
        out
    }

    /// Rows of flattened `patch × patch × 3` blocks in raster order.
    pub fn patchify(&self, patch: usize) -> Result<(usize, usize, Vec<f32>)> {
        if patch == 0 || !self.width.is_multiple_of(patch) || !self.height.is_multiple_of(patch) {
            return Err(UliError::GeometryError(format!(
                "{}×{} image not divisible into {patch}-pixel patches",
                self.width, self.height
            )));
        }
        let (gw, gh) = (self.width / patch, self.height / patch);
        let row_len = patch * patch * 3;
        let mut out = Vec::with_capacity(gw * gh * row_len);
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    let start = ((py * patch + y) * self.width + px * patch) * 3;
                    out.extend_from_slice(&self.data[start..start + patch * 3]);
                }
            }
        }
        Ok((gw, gh, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_counts() {
        let img = Image::new(64, 64);
        let (gw, gh, data) = img.patchify(8).unwrap();
        assert_eq!(gw * gh, 64);
        assert_eq!(data.len(), 64 * 8 * 8 * 3);
        assert!(Image::new(60, 64).patchify(8).is_err());
    }

    #[test]
    fn patch_rows_follow_raster_order() {
        let mut img = Image::new(4, 4);
        img.set_pixel(2, 0, [1.0, 0.0, 0.0]);
        let (_, _, data) = img.patchify(2).unwrap();
        // second patch, first pixel
        assert_eq!(data[12], 1.0);
    }

    #[test]
    fn downscale_averages_blocks() {
        let mut img = Image::new(4, 4);
        img.set_pixel(0, 0, [1.0, 1.0, 1.0]);
        let small = img.resize(2, 2);
        assert_eq!(small.pixel(0, 0), [0.25; 3]);
        assert_eq!(small.pixel(1, 1), [0.0; 3]);
    }
}
