//! Hand-written CPU kernels for the two hot elementwise-heavy ops of the
//! denoiser: 3×3 depthwise convolution and tanh-approximated GELU.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

trait Real: Copy + Default + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::AddAssign {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// `out[b,c,y,x] = Σ w[t,c]·in[b,c,y+dy−1,x+dx−1]`, or with the kernel
/// mirrored when `flip` is set (the input-gradient pass).
fn dw_conv<T: Real>(x: &[T], w: &[T], dims: (usize, usize, usize, usize), flip: bool) -> Vec<T> {
    let (b, c, h, wd) = dims;
    let mut out = vec![T::default(); x.len()];
    for bc in 0..b * c {
        let ch = bc % c;
        let plane = &x[bc * h * wd..(bc + 1) * h * wd];
        let dst = &mut out[bc * h * wd..(bc + 1) * h * wd];
        for t in 0..9 {
            let k = w[t * c + ch];
            let (dy, dx) = (t / 3, t % 3);
            let (oy, ox) = if flip {
                (1 - dy as isize, 1 - dx as isize)
            } else {
                (dy as isize - 1, dx as isize - 1)
            };
            for y in 0..h {
                let sy = y as isize + oy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let src = &plane[sy as usize * wd..(sy as usize + 1) * wd];
                let row = &mut dst[y * wd..(y + 1) * wd];
                let x0 = (-ox).max(0) as usize;
                let x1 = (wd as isize - ox.max(0)) as usize;
                for xx in x0..x1 {
                    row[xx] += k * src[(xx as isize + ox) as usize];
                }
            }
        }
    }
    out
}

/// `gw[t,c] = Σ g[b,c,y,x]·in[b,c,y+dy−1,x+dx−1]`.
fn dw_weight_grad<T: Real>(x: &[T], g: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, c, h, wd) = dims;
    let mut acc = vec![0f64; 9 * c];
    for bc in 0..b * c {
        let ch = bc % c;
        let plane = &x[bc * h * wd..(bc + 1) * h * wd];
        let gp = &g[bc * h * wd..(bc + 1) * h * wd];
        for t in 0..9 {
            let (oy, ox) = ((t / 3) as isize - 1, (t % 3) as isize - 1);
            let mut s = T::default();
            for y in 0..h {
                let sy = y as isize + oy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let src = &plane[sy as usize * wd..(sy as usize + 1) * wd];
                let row = &gp[y * wd..(y + 1) * wd];
                let x0 = (-ox).max(0) as usize;
                let x1 = (wd as isize - ox.max(0)) as usize;
                for xx in x0..x1 {
                    s += row[xx] * src[(xx as isize + ox) as usize];
                }
            }
            acc[t * c + ch] += s.to_f64();
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

enum DwMode {
    Forward,
    InputGrad,
    WeightGrad,
}

struct DwOp(DwMode);

impl CustomOp2 for DwOp {
    fn name(&self) -> &'static str {
        match self.0 {
            DwMode::Forward => "dwconv3",
            DwMode::InputGrad => "dwconv3-grad-input",
            DwMode::WeightGrad => "dwconv3-grad-weight",
        }
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        macro_rules! run {
            ($a:expr, $b:expr, $variant:ident) => {{
                let a = contiguous($a, l1)?;
                let b = contiguous($b, l2)?;
                match self.0 {
                    DwMode::Forward => (CpuStorage::$variant(dw_conv(a, b, d, false)), l1.shape().clone()),
                    DwMode::InputGrad => (CpuStorage::$variant(dw_conv(a, b, d, true)), l1.shape().clone()),
                    DwMode::WeightGrad => (CpuStorage::$variant(dw_weight_grad(a, b, d)), Shape::from((9, d.1))),
                }
            }};
        }
        Ok(match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => run!(a, b, F32),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => run!(a, b, F64),
            _ => candle_core::bail!("dwconv3 supports matching f32 or f64 inputs"),
        })
    }

    fn bwd(&self, arg1: &Tensor, arg2: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(arg2, &DwOp(DwMode::InputGrad))?;
        let gw = arg1.apply_op2_no_bwd(&grad, &DwOp(DwMode::WeightGrad))?;
        Ok((Some(gx), Some(gw)))
    }
}

/// Zero-padded 3×3 depthwise convolution of `x` (`B×C×H×W`) with taps `w` (`9×C`).
pub fn depthwise_conv3(x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if w.dims() != [9, c] {
        candle_core::bail!("depthwise taps {:?} do not match {c} channels", w.dims());
    }
    x.contiguous()?.apply_op2(&w.contiguous()?, DwOp(DwMode::Forward))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C: f64 = 0.044_715;

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

struct Gelu;
struct GeluGrad;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(contiguous(v, l)?.iter().map(|&x| gelu_f(f64::from(x)) as f32).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(contiguous(v, l)?.iter().map(|&x| gelu_f(x)).collect()),
            _ => candle_core::bail!("gelu supports f32 or f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-tanh-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(
                contiguous(x, l1)?
                    .iter()
                    .zip(contiguous(g, l2)?)
                    .map(|(&x, &g)| (gelu_df(f64::from(x)) * f64::from(g)) as f32)
                    .collect(),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(
                contiguous(x, l1)?.iter().zip(contiguous(g, l2)?).map(|(&x, &g)| gelu_df(x) * g).collect(),
            ),
            _ => candle_core::bail!("gelu grad supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

/// Geometry of a 3×3 sliding window over an NHWC map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window3 {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Window3 {
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - 2 * self.dilation - 1) / self.stride + 1
    }

    /// Source index along one axis for output `o` and tap `k`.
    fn src(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }
}

#[derive(Clone, Copy)]
struct Unfold {
    win: Window3,
    /// `(B, H, W, C)` of the folded map.
    dims: (usize, usize, usize, usize),
    fold: bool,
}

fn unfold<T: Real>(x: &[T], win: Window3, dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, h, w, c) = dims;
    let (ho, wo) = (win.out_size(h), win.out_size(w));
    let mut cols = vec![T::default(); b * ho * wo * 9 * c];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * 9 * c;
                for t in 0..9 {
                    let (Some(iy), Some(ix)) = (win.src(oy, t / 3, h), win.src(ox, t % 3, w)) else {
                        continue;
                    };
                    let src = ((bi * h + iy) * w + ix) * c;
                    cols[row + t * c..row + (t + 1) * c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn fold<T: Real>(cols: &[T], win: Window3, dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, h, w, c) = dims;
    let (ho, wo) = (win.out_size(h), win.out_size(w));
    let mut x = vec![T::default(); b * h * w * c];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * 9 * c;
                for t in 0..9 {
                    let (Some(iy), Some(ix)) = (win.src(oy, t / 3, h), win.src(ox, t % 3, w)) else {
                        continue;
                    };
                    let dst = ((bi * h + iy) * w + ix) * c;
                    for k in 0..c {
                        x[dst + k] += cols[row + t * c + k];
                    }
                }
            }
        }
    }
    x
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        if self.fold {
            "fold3"
        } else {
            "unfold3"
        }
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = self.dims;
        let rows = b * self.win.out_size(h) * self.win.out_size(w);
        let shape = if self.fold {
            Shape::from((b, h, w, c))
        } else {
            Shape::from((rows, 9 * c))
        };
        let out = match (s, self.fold) {
            (CpuStorage::F32(v), false) => CpuStorage::F32(unfold(contiguous(v, l)?, self.win, self.dims)),
            (CpuStorage::F64(v), false) => CpuStorage::F64(unfold(contiguous(v, l)?, self.win, self.dims)),
            (CpuStorage::F32(v), true) => CpuStorage::F32(fold(contiguous(v, l)?, self.win, self.dims)),
            (CpuStorage::F64(v), true) => CpuStorage::F64(fold(contiguous(v, l)?, self.win, self.dims)),
            _ => candle_core::bail!("unfold supports f32 or f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Unfold { fold: !self.fold, ..*self };
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

/// Patch matrix of an NHWC map: one row per output position, `9·C` columns
/// ordered tap-major.
pub fn unfold3(x: &Tensor, win: Window3) -> candle_core::Result<Tensor> {
    let dims = x.dims4()?;
    x.contiguous()?.apply_op1(Unfold { win, dims, fold: false })
}
