use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{} bytes for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self {
            height,
            width,
            data: rgb.repeat(height * width),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    /// Channel-planar floats in [−1, 1].
    pub fn to_planar_unit(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0f32; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = f32::from(px[c]) / 127.5 - 1.0;
            }
        }
        out
    }

    /// Inverse of [`to_planar_unit`](Self::to_planar_unit); values are clamped to [−1, 1].
    pub fn from_planar_unit(height: usize, width: usize, planes: &[f32]) -> Result<Self> {
        let n = height * width;
        if planes.len() != 3 * n {
            return Err(Error::Dimension(format!(
                "{} planar values for a {height}x{width} RGB image",
                planes.len()
            )));
        }
        let mut data = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                let v = planes[c * n + i].clamp(-1.0, 1.0);
                data[i * 3 + c] = ((v + 1.0) * 127.5).round() as u8;
            }
        }
        Self::new(height, width, data)
    }

    /// Mean absolute difference in [0, 255] units over pixels where `keep` is true.
    pub fn masked_mae(&self, other: &RgbImage, keep: &crate::grid::BinaryGrid) -> Result<f64> {
        if self.shape() != other.shape() || self.shape() != keep.shape() {
            return Err(Error::Dimension("masked_mae shape mismatch".into()));
        }
        let mut total = 0u64;
        let mut count = 0u64;
        for (i, &k) in keep.as_slice().iter().enumerate() {
            if k {
                for c in 0..3 {
                    total += u64::from(self.data[i * 3 + c].abs_diff(other.data[i * 3 + c]));
                }
                count += 3;
            }
        }
        Ok(if count == 0 { 0.0 } else { total as f64 / count as f64 })
    }
}
