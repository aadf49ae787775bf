//! Image ↔ latent codecs.
//!
//! The default codec is a lossless space-to-depth rearrangement: a factor-`f`
//! codec turns a `3×H×W` image into a `3f²×(H/f)×(W/f)` latent. Factor 1 is
//! the identity. A learned autoencoder can replace it behind [`Codec`].

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Codec: Send + Sync {
    /// Spatial reduction factor between image and latent.
    fn factor(&self) -> usize;
    fn latent_channels(&self, image_channels: usize) -> usize;
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
    fn decode(&self, latent: &Tensor) -> Result<Tensor>;
    /// Brings a `B×1×H×W` binary mask into latent layout, one value per latent cell.
    fn encode_mask(&self, mask: &Tensor, image_channels: usize) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceToDepth {
    pub factor: usize,
}

impl SpaceToDepth {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Parameter("codec factor must be positive".into()));
        }
        Ok(Self { factor })
    }
}

pub fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    if f == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Dimension(format!("{h}x{w} is not divisible by {f}")));
    }
    Ok(x
        .reshape((b, c, h / f, f, w / f, f))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * f * f, h / f, w / f))?)
}

pub fn depth_to_space(x: &Tensor, f: usize) -> Result<Tensor> {
    if f == 1 {
        return Ok(x.clone());
    }
    let (b, cf, h, w) = x.dims4()?;
    if cf % (f * f) != 0 {
        return Err(Error::Dimension(format!("{cf} channels not divisible by {}", f * f)));
    }
    let c = cf / (f * f);
    Ok(x
        .reshape((b, c, f, f, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, h * f, w * f))?)
}

impl Codec for SpaceToDepth {
    fn factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self, image_channels: usize) -> usize {
        image_channels * self.factor * self.factor
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        space_to_depth(image, self.factor)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        depth_to_space(latent, self.factor)
    }

    fn encode_mask(&self, mask: &Tensor, image_channels: usize) -> Result<Tensor> {
        let (b, c, h, w) = mask.dims4()?;
        if c != 1 {
            return Err(Error::Dimension(format!("mask has {c} channels, expected 1")));
        }
        let broadcast = mask.broadcast_as((b, image_channels, h, w))?.contiguous()?;
        space_to_depth(&broadcast, self.factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn round_trip_is_exact() {
        let x = Tensor::arange(0f32, 2.0 * 3.0 * 8.0 * 12.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 8, 12))
            .unwrap();
        for f in [1, 2, 4] {
            let c = SpaceToDepth::new(f).unwrap();
            let z = c.encode(&x).unwrap();
            assert_eq!(z.dims4().unwrap(), (2, 3 * f * f, 8 / f, 12 / f));
            let back = c.decode(&z).unwrap();
            let diff = (back - &x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(diff, 0.0);
        }
    }

    #[test]
    fn latent_cell_holds_its_pixel_block() {
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let z = space_to_depth(&x, 2).unwrap();
        // latent cell (0,0) holds pixels (0,0),(0,1),(1,0),(1,1)
        let cell: Vec<f32> = (0..4)
            .map(|c| z.get(0).unwrap().get(c).unwrap().get(0).unwrap().get(0).unwrap().to_scalar().unwrap())
            .collect();
        assert_eq!(cell, vec![0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn indivisible_is_dimension_error() {
        let x = Tensor::zeros((1, 3, 6, 8), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(space_to_depth(&x, 4), Err(Error::Dimension(_))));
    }
}
