//! Structural checks of the denoiser: size independence, zero-initialized
//! modulation, attention equivalences and gradients.

use candle_core::{DType, Device, Tensor, Var};
use changen_core::rng::rng;
use changen_model::diffusion::gaussian;
use changen_model::params::ParamStore;
use changen_model::rsdit::{attention_pairs, DenoiserConfig, RsDit};
use changen_model::Error;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn max_abs(t: &Tensor) -> Result<f64, String> {
    t.abs()
        .and_then(|a| a.flatten_all())
        .and_then(|a| a.max(0))
        .and_then(|a| a.to_dtype(DType::F64))
        .and_then(|a| a.to_scalar::<f64>())
        .map_err(err)
}

fn build(cfg: &DenoiserConfig, seed: u64, dtype: DType) -> Result<(ParamStore, RsDit), String> {
    let store = ParamStore::new(seed, dtype, &Device::Cpu);
    let net = RsDit::new(&store.root(), cfg).map_err(err)?;
    Ok((store, net))
}

/// Latent `B×C×s/4×s/4` and condition `B×K×s×s` for an `s`-pixel image.
fn inputs(cfg: &DenoiserConfig, size: usize, batch: usize, seed: u64, dtype: DType) -> Result<(Tensor, Tensor), String> {
    let mut r = rng(seed);
    let dev = Device::Cpu;
    let x = gaussian(&[batch, cfg.in_channels, size / 4, size / 4], &mut r, dtype, &dev).map_err(err)?;
    let c = gaussian(&[batch, cfg.condition_channels, size, size], &mut r, dtype, &dev).map_err(err)?;
    Ok((x, c))
}

/// The parameter count does not depend on the input size, and a model
/// built for 64² runs at 128² with the matching output shape.
pub fn check_size_independence(cfg: &DenoiserConfig) -> Result<usize, String> {
    let (store, net) = build(cfg, 0, DType::F32)?;
    let count = store.num_parameters();
    for size in [64usize, 128] {
        let (x, c) = inputs(cfg, size, 1, 1, DType::F32)?;
        let out = net.forward(&x, &[10], &c).map_err(err)?;
        let want = (1, cfg.out_channels(), size / 4, size / 4);
        if out.dims4().map_err(err)? != want {
            return Err(format!("{size}²: output {:?}, want {want:?}", out.dims()));
        }
        if store.num_parameters() != count {
            return Err("running at a new size changed the parameter count".into());
        }
    }
    let (rebuilt, _) = build(cfg, 7, DType::F32)?;
    if rebuilt.num_parameters() != count {
        return Err("parameter count differs between builds".into());
    }
    Ok(count)
}

/// The same network with a learned absolute position table sized for 64²
/// cannot run at 128².
pub fn check_abs_pos_ablation(cfg: &DenoiserConfig) -> Result<(), String> {
    let mut ablated = cfg.clone();
    let grid = 64 / 4 / cfg.patch_size;
    ablated.abs_pos_embed = Some((grid, grid));
    let (_, net) = build(&ablated, 0, DType::F32)?;
    let (x, c) = inputs(cfg, 64, 1, 2, DType::F32)?;
    net.forward(&x, &[10], &c).map_err(|e| format!("ablation fails even at 64²: {e}"))?;
    let (x, c) = inputs(cfg, 128, 1, 2, DType::F32)?;
    match net.forward(&x, &[10], &c) {
        Err(Error::Dimension(_)) => Ok(()),
        Err(e) => Err(format!("unexpected error kind: {e}")),
        Ok(_) => Err("ablation ran at 128²".into()),
    }
}

/// At initialization every block is the identity and the output is zero.
pub fn check_adaln_zero_identity(cfg: &DenoiserConfig) -> Result<f64, String> {
    let (_, net) = build(cfg, 3, DType::F32)?;
    let (x, c) = inputs(cfg, 64, 2, 4, DType::F32)?;
    let (tokens, grid) = net.embed(&x, &c).map_err(err)?;
    let temb = net.timestep_embedding(&[17, 400], 2, &x).map_err(err)?;
    let mut worst = 0.0f64;
    for block in net.blocks() {
        let out = block.forward(&tokens, &temb, grid).map_err(err)?;
        worst = worst.max(max_abs(&(out - &tokens).map_err(err)?)?);
    }
    worst = worst.max(max_abs(&net.forward(&x, &[17, 400], &c).map_err(err)?)?);
    if worst > 1e-6 {
        return Err(format!("deviation {worst:e} at initialization"));
    }
    Ok(worst)
}

/// A windowed model whose window covers the whole grid equals the same
/// weights with global attention everywhere.
pub fn check_full_window_is_global(cfg: &DenoiserConfig) -> Result<f64, String> {
    let size = 64;
    let grid = size / 4 / cfg.patch_size;
    let mut windowed = cfg.clone();
    windowed.window_size = grid;
    windowed.global_attention_period = cfg.depth + 1;
    let mut global = cfg.clone();
    global.global_attention_period = 1;
    let (sw, nw) = build(&windowed, 11, DType::F32)?;
    let (sg, ng) = build(&global, 11, DType::F32)?;
    sw.randomize(12, 0.05).map_err(err)?;
    sg.randomize(12, 0.05).map_err(err)?;
    if nw.blocks().iter().any(|b| b.is_global()) || !ng.blocks().iter().all(|b| b.is_global()) {
        return Err("attention schedule not as configured".into());
    }
    let (x, c) = inputs(cfg, size, 2, 13, DType::F32)?;
    let a = nw.forward(&x, &[5, 700], &c).map_err(err)?;
    let b = ng.forward(&x, &[5, 700], &c).map_err(err)?;
    let diff = max_abs(&(a - b).map_err(err)?)?;
    if diff > 1e-5 {
        return Err(format!("outputs differ by {diff:e}"));
    }
    Ok(diff)
}

/// Windowed blocks score linearly many pairs in the token count, global
/// blocks quadratically.
pub fn check_attention_scaling(cfg: &DenoiserConfig) -> Result<(), String> {
    let w = cfg.window_size;
    let (g1, g2) = (8usize, 16usize);
    if attention_pairs(false, w, g2, g2) != 4 * attention_pairs(false, w, g1, g1) {
        return Err("windowed attention is not linear in tokens".into());
    }
    if attention_pairs(true, w, g2, g2) != 16 * attention_pairs(true, w, g1, g1) {
        return Err("global attention is not quadratic in tokens".into());
    }
    Ok(())
}

/// Backpropagated gradients against central finite differences in f64.
pub fn check_gradients(cfg: &DenoiserConfig, probes: usize) -> Result<f64, String> {
    let (store, net) = build(cfg, 21, DType::F64)?;
    store.randomize(22, 0.1).map_err(err)?;
    let (x, c) = inputs(cfg, 32, 2, 23, DType::F64)?;
    let out_dims = net.forward(&x, &[3, 600], &c).map_err(err)?.dims().to_vec();
    let weights = gaussian(&out_dims, &mut rng(24), DType::F64, &Device::Cpu).map_err(err)?;
    let loss = |net: &RsDit| -> Result<Tensor, String> {
        let out = net.forward(&x, &[3, 600], &c).map_err(err)?;
        (out * &weights).and_then(|t| t.sum_all()).map_err(err)
    };
    let grads = loss(&net)?.backward().map_err(err)?;
    let named: Vec<(String, Var)> = store.named().into_iter().collect();
    let mut r = rng(25);
    let mut worst = 0.0f64;
    let h = 1e-5;
    use rand::Rng;
    for _ in 0..probes {
        let (name, var) = &named[r.random_range(0..named.len())];
        let n = var.elem_count();
        let idx = r.random_range(0..n);
        let original: Vec<f64> = var.as_tensor().flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
        let analytic: Vec<f64> = grads
            .get(var.as_tensor())
            .ok_or_else(|| format!("no gradient for {name}"))?
            .flatten_all()
            .and_then(|t| t.to_vec1())
            .map_err(err)?;
        let eval_at = |delta: f64| -> Result<f64, String> {
            let mut v = original.clone();
            v[idx] += delta;
            var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).map_err(err)?).map_err(err)?;
            loss(&net)?.to_scalar::<f64>().map_err(err)
        };
        let numeric = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
        var.set(&Tensor::from_vec(original, var.shape(), &Device::Cpu).map_err(err)?).map_err(err)?;
        let a = analytic[idx];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < 1e-7 { 0.0 } else { (a - numeric).abs() / scale };
        if rel > 1e-3 {
            return Err(format!("{name}[{idx}]: analytic {a:e}, numeric {numeric:e}"));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}
