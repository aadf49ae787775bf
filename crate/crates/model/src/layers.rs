//! Small building blocks shared by the denoiser and the detector.

use candle_core::{Module, Tensor, D};

use crate::error::Result;
use crate::kernels::{unfold3, Window3};
use crate::params::Params;

/// Affine map over the last dimension. Leading dimensions are flattened so
/// the product runs as one matrix multiply.
#[derive(Clone, Debug)]
pub struct Linear {
    weight_t: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        Ok(Self {
            weight_t: weight.t()?,
            bias,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims();
        let in_dim = dims[dims.len() - 1];
        let rows = x.elem_count() / in_dim;
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight_t)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().expect("rank >= 1") = self.weight_t.dim(1)?;
        y.reshape(out_dims)
    }
}

/// Xavier-uniform weight, zero bias.
pub fn linear(p: &Params, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let w = p.uniform("weight", &[out_dim, in_dim], bound)?;
    let b = p.zeros("bias", &[out_dim])?;
    Linear::new(w, b)
}

pub fn linear_zero(p: &Params, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let w = p.zeros("weight", &[out_dim, in_dim])?;
    let b = p.zeros("bias", &[out_dim])?;
    Linear::new(w, b)
}

/// 3×3 convolution over NHWC maps, run as patch extraction plus one matrix multiply.
#[derive(Clone, Debug)]
pub struct Conv3 {
    /// `9·in × out`, rows ordered tap-major.
    weight: Tensor,
    bias: Tensor,
    win: Window3,
}

impl Conv3 {
    pub fn new(p: &Params, in_c: usize, out_c: usize, stride: usize, dilation: usize) -> Result<Self> {
        let bound = (6.0 / (9 * in_c) as f64).sqrt() / 2.0;
        Ok(Self {
            weight: p.uniform("weight", &[9 * in_c, out_c], bound)?,
            bias: p.zeros("bias", &[out_c])?,
            win: Window3 {
                stride,
                padding: dilation,
                dilation,
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let (ho, wo) = (self.win.out_size(h), self.win.out_size(w));
        let y = unfold3(x, self.win)?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, ho, wo, self.bias.dim(0)?))?)
    }
}

/// Layer norm over the last dimension without learned affine terms.
pub fn layer_norm_plain(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Layer norm over the last (channel) dimension with learned scale and shift.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl ChannelNorm {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.constant("gamma", &[channels], 1.0)?,
            beta: p.zeros("beta", &[channels])?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = layer_norm_plain(x, self.eps)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// 3×3 depthwise convolution with zero padding on an NCHW map.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3 {
    /// `(9, C)`: one weight per tap and channel.
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3 {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        let bound = (6.0f64 / 9.0).sqrt() / 2.0;
        Ok(Self {
            weight: p.uniform("weight", &[9, channels], bound)?,
            bias: p.zeros("bias", &[channels])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let out = crate::kernels::depthwise_conv3(x, &self.weight)?;
        Ok(out.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}
