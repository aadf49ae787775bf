//! Dense condition rasters fed to the denoiser.

use candle_core::{DType, Device, Tensor};
use changen_core::{ChangeMask, Condition, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a [`Condition`] becomes a `C×H×W` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionEncoding {
    /// One-hot over `num_classes` channels.
    Semantic { num_classes: usize },
    /// Single 0/1 channel of contour pixels.
    Contour,
}

impl ConditionEncoding {
    pub fn channels(&self) -> usize {
        match self {
            ConditionEncoding::Semantic { num_classes } => *num_classes,
            ConditionEncoding::Contour => 1,
        }
    }

    /// `1×C×H×W` tensor for one condition.
    pub fn encode(&self, condition: &Condition, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = condition.shape();
        let n = h * w;
        let values = match (self, condition) {
            (ConditionEncoding::Semantic { num_classes }, Condition::Semantic(m)) => {
                if usize::from(m.num_classes()) != *num_classes {
                    return Err(Error::Config(format!(
                        "model expects {num_classes} classes, mask has {}",
                        m.num_classes()
                    )));
                }
                let mut v = vec![0f32; num_classes * n];
                for (i, &c) in m.grid().as_slice().iter().enumerate() {
                    v[usize::from(c) * n + i] = 1.0;
                }
                v
            }
            (ConditionEncoding::Contour, Condition::Contour(c)) => {
                c.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
            }
            _ => {
                return Err(Error::Config(format!(
                    "condition kind does not match encoding {self:?}"
                )))
            }
        };
        Ok(Tensor::from_vec(values, (1, self.channels(), h, w), device)?.to_dtype(dtype)?)
    }

    pub fn encode_batch(&self, conditions: &[&Condition], dtype: DType, device: &Device) -> Result<Tensor> {
        let parts = conditions
            .iter()
            .map(|c| self.encode(c, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }
}

/// `1×3×H×W` tensor in [−1, 1].
pub fn image_to_tensor(img: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(img.to_planar_unit(), (1, 3, img.height(), img.width()), device)?.to_dtype(dtype)?)
}

/// Inverse of [`image_to_tensor`] for one batch element; clamps to [−1, 1].
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Dimension(format!("{c} channels, expected 3")));
    }
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(RgbImage::from_planar_unit(h, w, &v)?)
}

/// `1×1×H×W` 0/1 tensor.
pub fn mask_to_tensor(mask: &ChangeMask, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = mask.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, (1, 1, mask.height(), mask.width()), device)?.to_dtype(dtype)?)
}
