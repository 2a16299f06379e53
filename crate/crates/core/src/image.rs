//! Planar RGB images with values in `[0, 1]` and patch extraction.

use crate::error::{HarmonyError, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Channel-major (`CHW`) image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set_rgb(y, x, rgb);
            }
        }
        img
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(HarmonyError::Shape(format!(
                "{} values for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Number of patches along each axis for a square patch size.
    pub fn grid(&self, patch: usize) -> Result<(usize, usize)> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(HarmonyError::Shape(format!(
                "{}x{} image is not divisible into {patch}px patches",
                self.height, self.width
            )));
        }
        Ok((self.height / patch, self.width / patch))
    }

    /// Flattens patches in raster order; each row holds one patch laid out
    /// as `(py, px, channel)`.
    pub fn patchify(&self, patch: usize) -> Result<Tensor> {
        let (gh, gw) = self.grid(patch)?;
        let dim = patch * patch * CHANNELS;
        let mut out = Tensor::zeros(gh * gw, dim);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = out.row_mut(gy * gw + gx);
                let mut i = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        for c in 0..CHANNELS {
                            row[i] = self.get(c, gy * patch + py, gx * patch + px);
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Stacks the patches of equally sized images into `(n * L) x (p² · 3)`.
pub fn patchify_batch(images: &[Image], patch: usize) -> Result<(Tensor, usize, (usize, usize))> {
    let first = images
        .first()
        .ok_or_else(|| HarmonyError::InvalidArgument("empty image batch".into()))?;
    let grid = first.grid(patch)?;
    let mut parts = Vec::with_capacity(images.len());
    for img in images {
        if (img.height, img.width) != (first.height, first.width) {
            return Err(HarmonyError::Shape(format!(
                "mixed image sizes {}x{} and {}x{}",
                first.height, first.width, img.height, img.width
            )));
        }
        parts.push(img.patchify(patch)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok((Tensor::vstack(&refs)?, grid.0 * grid.1, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_layout_is_raster_then_pixel_then_channel() {
        let mut img = Image::new(4, 4);
        img.set(2, 0, 3, 0.5); // blue channel, top-right pixel
        let p = img.patchify(2).unwrap();
        assert_eq!(p.shape(), (4, 12));
        // patch 1 (top-right), pixel (0,1), channel 2
        assert_eq!(p.get(1, 5), 0.5);
    }

    #[test]
    fn indivisible_patch_size_rejected() {
        assert!(Image::new(10, 10).patchify(4).is_err());
    }
}
