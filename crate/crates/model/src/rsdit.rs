//! Resolution-scalable diffusion transformer.
//!
//! A patchified transformer with no absolute position embedding. Position
//! enters only through a zero-padded 3×3 depthwise convolution inside every
//! FFN, and attention is windowed except in every `g`-th block (1-indexed),
//! which attends globally. Timesteps modulate each block through adaptive
//! layer norm with zero-initialized gates; the dense condition is embedded by
//! a strided convolutional network and added to the data tokens.

use candle_core::{Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{layer_norm_plain, linear, linear_zero, ChannelNorm, Conv3, DepthwiseConv3, Linear};
use crate::params::Params;

pub const DENSE_EMBED_STRIDES: [usize; 8] = [1, 1, 2, 1, 2, 1, 2, 1];
/// Total spatial reduction of the dense embedding network.
pub const DENSE_EMBED_FACTOR: usize = 8;
const TIMESTEP_FEATURES: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub global_attention_period: usize,
    pub condition_channels: usize,
    pub in_channels: usize,
    pub learn_covariance: bool,
    pub mlp_ratio: usize,
    /// Widths of the first six dense-embedding blocks; the last two use `hidden_dim`.
    pub embed_widths: [usize; 6],
    /// Ablation only: a learned absolute position table for this token grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_pos_embed: Option<(usize, usize)>,
}

impl DenoiserConfig {
    /// Desk-scale default over a 48-channel space-to-depth latent.
    pub fn desk(condition_channels: usize, in_channels: usize) -> Self {
        Self {
            patch_size: 2,
            hidden_dim: 192,
            depth: 8,
            num_heads: 6,
            window_size: 4,
            global_attention_period: 4,
            condition_channels,
            in_channels,
            learn_covariance: true,
            mlp_ratio: 4,
            embed_widths: [16, 16, 32, 32, 64, 64],
            abs_pos_embed: None,
        }
    }

    /// Small configuration for tests: `d = 32`, two blocks.
    pub fn tiny(condition_channels: usize, in_channels: usize) -> Self {
        Self {
            patch_size: 2,
            hidden_dim: 32,
            depth: 2,
            num_heads: 2,
            window_size: 2,
            global_attention_period: 2,
            condition_channels,
            in_channels,
            learn_covariance: true,
            mlp_ratio: 2,
            embed_widths: [8, 8, 8, 8, 16, 16],
            abs_pos_embed: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        if self.learn_covariance {
            2 * self.in_channels
        } else {
            self.in_channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.depth >= 1, "depth must be at least 1"),
            (self.patch_size >= 1, "patch_size must be at least 1"),
            (self.window_size >= 1, "window_size must be at least 1"),
            (self.global_attention_period >= 1, "global_attention_period must be at least 1"),
            (self.num_heads >= 1 && self.hidden_dim.is_multiple_of(self.num_heads), "hidden_dim must divide into heads"),
            (self.condition_channels >= 1 && self.in_channels >= 1, "channel counts must be positive"),
            (self.mlp_ratio >= 1, "mlp_ratio must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    /// 1-indexed block `b` attends globally iff `b` is a multiple of `g`.
    pub fn is_global(&self, block_index: usize) -> bool {
        (block_index + 1).is_multiple_of(self.global_attention_period)
    }
}

/// `B×C×H×W → (B×(H/p·W/p)×C·p², (H/p, W/p))`.
pub fn patchify(x: &Tensor, p: usize) -> Result<(Tensor, (usize, usize))> {
    let (b, c, h, w) = x.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Dimension(format!("{h}x{w} is not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let t = x
        .reshape((b, c, gh, p, gw, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b, gh * gw, c * p * p))?;
    Ok((t, (gh, gw)))
}

pub fn unpatchify(tokens: &Tensor, p: usize, grid: (usize, usize)) -> Result<Tensor> {
    let (b, n, f) = tokens.dims3()?;
    let (gh, gw) = grid;
    if n != gh * gw || f % (p * p) != 0 {
        return Err(Error::Dimension(format!("{n} tokens of {f} features for grid {gh}x{gw}, p={p}")));
    }
    let c = f / (p * p);
    Ok(tokens
        .reshape((b, gh, gw, c, p, p))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((b, c, gh * p, gw * p))?)
}

/// `B×H×W×C → (B·nW)×ws²×C`; `H` and `W` must be multiples of `ws`.
pub fn window_partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % ws != 0 || w % ws != 0 {
        return Err(Error::Dimension(format!("{h}x{w} grid not divisible by window {ws}")));
    }
    Ok(x
        .reshape((b, h / ws, ws, w / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b * (h / ws) * (w / ws), ws * ws, c))?)
}

pub fn window_reverse(windows: &Tensor, ws: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = windows.dim(D::Minus1)?;
    Ok(windows
        .reshape((b, h / ws, w / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h, w, c))?)
}

fn padded(n: usize, ws: usize) -> usize {
    n.div_ceil(ws) * ws
}

/// Query–key pairs scored by one attention layer over a `gh×gw` token grid.
pub fn attention_pairs(global: bool, window: usize, gh: usize, gw: usize) -> usize {
    if global {
        (gh * gw).pow(2)
    } else {
        let windows = padded(gh, window) / window * (padded(gw, window) / window);
        windows * window.pow(4)
    }
}

/// Sinusoidal features of integer timesteps, `B×256`.
pub fn timestep_features(steps: &[usize], batch: usize, like: &Tensor) -> Result<Tensor> {
    if steps.len() != 1 && steps.len() != batch {
        return Err(Error::Dimension(format!("{} timesteps for batch {batch}", steps.len())));
    }
    let half = TIMESTEP_FEATURES / 2;
    let mut v = Vec::with_capacity(batch * TIMESTEP_FEATURES);
    for i in 0..batch {
        let t = steps[if steps.len() == 1 { 0 } else { i }] as f64;
        let freqs: Vec<f64> = (0..half)
            .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp() * t)
            .collect();
        v.extend(freqs.iter().map(|a| a.cos()));
        v.extend(freqs.iter().map(|a| a.sin()));
    }
    Ok(Tensor::from_vec(v, (batch, TIMESTEP_FEATURES), like.device())?.to_dtype(like.dtype())?)
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

/// Merges the embedded condition into the data tokens.
fn merge_condition(tokens: &Tensor, cond_tokens: &Tensor) -> Result<Tensor> {
    Ok((tokens + cond_tokens)?)
}

#[derive(Clone, Debug)]
struct DenseEmbed {
    convs: Vec<Conv3>,
    norms: Vec<ChannelNorm>,
}

impl DenseEmbed {
    fn new(p: &Params, cfg: &DenoiserConfig) -> Result<Self> {
        let mut widths = cfg.embed_widths.to_vec();
        widths.extend([cfg.hidden_dim, cfg.hidden_dim]);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_c = cfg.condition_channels;
        for (i, (&out_c, &stride)) in widths.iter().zip(&DENSE_EMBED_STRIDES).enumerate() {
            let bp = p.pp(&format!("{i}"));
            convs.push(Conv3::new(&bp.pp("conv"), in_c, out_c, stride, 1)?);
            norms.push(ChannelNorm::new(&bp.pp("norm"), out_c)?);
            in_c = out_c;
        }
        Ok(Self { convs, norms })
    }

    /// NCHW condition to an NHWC embedding map.
    fn forward(&self, cond: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = cond.dims4()?;
        if h % DENSE_EMBED_FACTOR != 0 || w % DENSE_EMBED_FACTOR != 0 {
            return Err(Error::Dimension(format!(
                "condition {h}x{w} is not divisible by {DENSE_EMBED_FACTOR}"
            )));
        }
        let mut x = cond.permute((0, 2, 3, 1))?;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = norm.forward(&conv.forward(&x)?)?.silu()?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    /// `x`: `B×n×d`; `bias`: additive `B×1×1×n` key mask or none.
    fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        Ok(self.proj.forward(&out)?)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    ada: Linear,
    attn: Attention,
    fc1: Linear,
    dw: DepthwiseConv3,
    fc2: Linear,
    global: bool,
    window: usize,
}

impl Block {
    fn new(p: &Params, cfg: &DenoiserConfig, global: bool) -> Result<Self> {
        let d = cfg.hidden_dim;
        let hidden = d * cfg.mlp_ratio;
        Ok(Self {
            ada: linear_zero(&p.pp("ada"), d, 6 * d)?,
            attn: Attention {
                qkv: linear(&p.pp("qkv"), d, 3 * d)?,
                proj: linear(&p.pp("proj"), d, d)?,
                heads: cfg.num_heads,
            },
            fc1: linear(&p.pp("fc1"), d, hidden)?,
            dw: DepthwiseConv3::new(&p.pp("dw"), hidden)?,
            fc2: linear(&p.pp("fc2"), hidden, d)?,
            global,
            window: cfg.window_size,
        })
    }

    pub fn is_global(&self) -> bool {
        self.global
    }

    fn windowed_attention(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let (b, _, d) = x.dims3()?;
        let (gh, gw) = grid;
        let ws = self.window;
        let (ph, pw) = (padded(gh, ws), padded(gw, ws));
        let mut g = x.reshape((b, gh, gw, d))?;
        if (ph, pw) != (gh, gw) {
            g = g.pad_with_zeros(1, 0, ph - gh)?.pad_with_zeros(2, 0, pw - gw)?;
        }
        let windows = window_partition(&g, ws)?;
        let bias = if (ph, pw) != (gh, gw) {
            let valid: Vec<f32> = (0..ph)
                .flat_map(|y| (0..pw).map(move |x| if y < gh && x < gw { 0.0 } else { -1e9 }))
                .collect();
            let m = Tensor::from_vec(valid, (1, ph, pw, 1), x.device())?.to_dtype(x.dtype())?;
            let per_window = window_partition(&m, ws)?; // nW × ws² × 1
            let nw = per_window.dim(0)?;
            let per_window = per_window.reshape((1, nw, 1, 1, ws * ws))?;
            Some(
                per_window
                    .broadcast_as((b, nw, 1, 1, ws * ws))?
                    .reshape((b * nw, 1, 1, ws * ws))?,
            )
        } else {
            None
        };
        let out = self.attn.forward(&windows, bias.as_ref())?;
        let out = window_reverse(&out, ws, b, ph, pw)?;
        let out = if (ph, pw) != (gh, gw) {
            out.narrow(1, 0, gh)?.narrow(2, 0, gw)?
        } else {
            out
        };
        Ok(out.reshape((b, gh * gw, d))?)
    }

    fn ffn(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let h = self.fc1.forward(x)?;
        let hidden = h.dim(2)?;
        let spatial = h.transpose(1, 2)?.reshape((b, hidden, grid.0, grid.1))?;
        let mixed = self.dw.forward(&spatial)?;
        let h = mixed.reshape((b, hidden, n))?.transpose(1, 2)?;
        let h = crate::kernels::gelu(&h)?;
        Ok(self.fc2.forward(&h)?)
    }

    /// `x`: `B×N×d` tokens; `c`: `B×d` timestep embedding.
    pub fn forward(&self, x: &Tensor, c: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let mods = self.ada.forward(&c.silu()?)?.unsqueeze(1)?.chunk(6, D::Minus1)?;
        let h = modulate(&layer_norm_plain(x, 1e-6)?, &mods[0], &mods[1])?;
        let a = if self.global {
            self.attn.forward(&h, None)?
        } else {
            self.windowed_attention(&h, grid)?
        };
        let x = (x + a.broadcast_mul(&mods[2])?)?;
        let h = modulate(&layer_norm_plain(&x, 1e-6)?, &mods[3], &mods[4])?;
        let f = self.ffn(&h, grid)?;
        Ok((&x + f.broadcast_mul(&mods[5])?)?)
    }
}

#[derive(Clone, Debug)]
pub struct RsDit {
    cfg: DenoiserConfig,
    x_embed: Linear,
    dense: DenseEmbed,
    t_fc1: Linear,
    t_fc2: Linear,
    blocks: Vec<Block>,
    final_ada: Linear,
    final_linear: Linear,
    pos: Option<Tensor>,
}

impl RsDit {
    pub fn new(p: &Params, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let pp = cfg.patch_size * cfg.patch_size;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&p.pp(&format!("blocks.{i}")), cfg, cfg.is_global(i)))
            .collect::<Result<Vec<_>>>()?;
        let pos = match cfg.abs_pos_embed {
            Some((gh, gw)) => Some(p.normal("pos_embed", &[1, gh * gw, d], 0.02)?),
            None => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            x_embed: linear(&p.pp("x_embed"), cfg.in_channels * pp, d)?,
            dense: DenseEmbed::new(&p.pp("dense"), cfg)?,
            t_fc1: linear(&p.pp("t_embed.0"), TIMESTEP_FEATURES, d)?,
            t_fc2: linear(&p.pp("t_embed.1"), d, d)?,
            blocks,
            final_ada: linear_zero(&p.pp("final.ada"), d, 2 * d)?,
            final_linear: linear_zero(&p.pp("final.linear"), d, pp * cfg.out_channels())?,
            pos,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn timestep_embedding(&self, steps: &[usize], batch: usize, like: &Tensor) -> Result<Tensor> {
        let f = timestep_features(steps, batch, like)?;
        Ok(self.t_fc2.forward(&self.t_fc1.forward(&f)?.silu()?)?)
    }

    /// Condition embedding as tokens, `B×(H/8·W/8)×d`.
    pub fn embed_condition(&self, cond: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let e = self.dense.forward(cond)?;
        let (b, h, w, d) = e.dims4()?;
        Ok((e.reshape((b, h * w, d))?, (h, w)))
    }

    /// Token input to block 1 (data tokens plus condition) and its grid.
    pub fn embed(&self, x: &Tensor, cond: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let (b, c, _, _) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Dimension(format!("input has {c} channels, expected {}", self.cfg.in_channels)));
        }
        let (cb, cc, _, _) = cond.dims4()?;
        if cc != self.cfg.condition_channels {
            return Err(Error::Config(format!(
                "condition has {cc} channels, model expects {}",
                self.cfg.condition_channels
            )));
        }
        if cb != b {
            return Err(Error::Dimension(format!("batch {b} vs condition batch {cb}")));
        }
        let (tokens, grid) = patchify(x, self.cfg.patch_size)?;
        let (cond_tokens, cgrid) = self.embed_condition(cond)?;
        if cgrid != grid {
            return Err(Error::Dimension(format!(
                "condition grid {cgrid:?} does not match token grid {grid:?}"
            )));
        }
        let mut t = merge_condition(&self.x_embed.forward(&tokens)?, &cond_tokens)?;
        if let Some(pos) = &self.pos {
            let table = pos.dim(1)?;
            if table != grid.0 * grid.1 {
                return Err(Error::Dimension(format!(
                    "position table holds {table} tokens, input has {}",
                    grid.0 * grid.1
                )));
            }
            t = t.broadcast_add(pos)?;
        }
        Ok((t, grid))
    }

    /// Raw network output `B×out_channels×h×w`.
    pub fn forward(&self, x: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        let (mut t, grid) = self.embed(x, cond)?;
        let c = self.timestep_embedding(steps, b, x)?;
        for block in &self.blocks {
            t = block.forward(&t, &c, grid)?;
        }
        let mods = self.final_ada.forward(&c.silu()?)?.unsqueeze(1)?.chunk(2, D::Minus1)?;
        let h = modulate(&layer_norm_plain(&t, 1e-6)?, &mods[0], &mods[1])?;
        unpatchify(&self.final_linear.forward(&h)?, self.cfg.patch_size, grid)
    }

    /// Splits the raw output into `(ε, v)`; `v` is `None` without a covariance head.
    pub fn forward_split(&self, x: &Tensor, steps: &[usize], cond: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let out = self.forward(x, steps, cond)?;
        if !self.cfg.learn_covariance {
            return Ok((out, None));
        }
        let c = self.cfg.in_channels;
        Ok((out.narrow(1, 0, c)?, Some(out.narrow(1, c, c)?)))
    }

    /// Query–key pairs scored across all blocks for a `gh×gw` token grid.
    pub fn attention_pairs(&self, gh: usize, gw: usize) -> usize {
        self.blocks
            .iter()
            .map(|b| attention_pairs(b.global, self.cfg.window_size, gh, gw))
            .sum()
    }
}
