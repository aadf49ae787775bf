//! Tensor-level diffusion operations: forward perturbation, training losses
//! and deterministic DDIM steps.
//!
//! Functions taking `steps: &[usize]` accept either one step for the whole
//! batch or one step per batch element.

use std::f64::consts::{LN_2, PI};

use candle_core::{DType, Device, Tensor};
use changen_core::rng::StageRng;
use changen_core::NoiseSchedule;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian(shape: &[usize], rng: &mut StageRng, dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

fn check_steps(steps: &[usize], schedule: &NoiseSchedule, allow_zero: bool) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::Parameter("no steps given".into()));
    }
    for &s in steps {
        schedule.check_step(s)?;
        if s == 0 && !allow_zero {
            return Err(Error::Parameter("step 0 has no reverse transition".into()));
        }
    }
    Ok(())
}

/// Per-sample scalars broadcastable against `x`: `[B, 1, …]` or `[1, …]`.
fn coef(x: &Tensor, steps: &[usize], f: impl Fn(usize) -> f64) -> Result<Tensor> {
    let rank = x.rank();
    let values: Vec<f64> = steps.iter().map(|&s| f(s)).collect();
    let mut shape = vec![1; rank];
    if values.len() > 1 {
        if rank == 0 || x.dim(0)? != values.len() {
            return Err(Error::Dimension(format!(
                "{} steps for a batch of shape {:?}",
                values.len(),
                x.dims()
            )));
        }
        shape[0] = values.len();
    }
    Ok(Tensor::from_vec(values, shape, x.device())?.to_dtype(x.dtype())?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `√ᾱ·x0 + √(1−ᾱ)·noise`.
pub fn perturb(x0: &Tensor, steps: &[usize], noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    check_steps(steps, schedule, true)?;
    same_shape(x0, noise, "perturb noise")?;
    let a = coef(x0, steps, |s| schedule.alpha_bar(s).sqrt())?;
    let b = coef(x0, steps, |s| (1.0 - schedule.alpha_bar(s)).sqrt())?;
    Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&b)?)?)
}

/// Mean squared error over every element.
pub fn simple_loss(eps_pred: &Tensor, eps_true: &Tensor) -> Result<Tensor> {
    same_shape(eps_pred, eps_true, "simple_loss")?;
    Ok((eps_pred - eps_true)?.sqr()?.mean_all()?)
}

/// `x̂0 = (x_i − √(1−ᾱ)·ε)/√ᾱ`.
pub fn predict_x0(x_i: &Tensor, eps: &Tensor, steps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    check_steps(steps, schedule, false)?;
    let a = coef(x_i, steps, |s| 1.0 / schedule.alpha_bar(s).sqrt())?;
    let b = coef(x_i, steps, |s| ((1.0 - schedule.alpha_bar(s)) / schedule.alpha_bar(s)).sqrt())?;
    Ok((x_i.broadcast_mul(&a)? - eps.broadcast_mul(&b)?)?)
}

/// Mean of q(x^(i−1) | x^(i), x^(0)).
pub fn posterior_mean(x0: &Tensor, x_i: &Tensor, steps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    check_steps(steps, schedule, false)?;
    let c0 = coef(x0, steps, |s| schedule.posterior_mean_coefs(s).0)?;
    let ci = coef(x0, steps, |s| schedule.posterior_mean_coefs(s).1)?;
    Ok((x0.broadcast_mul(&c0)? + x_i.broadcast_mul(&ci)?)?)
}

/// Clipped log posterior variance broadcast to `like`.
pub fn posterior_log_variance(like: &Tensor, steps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    check_steps(steps, schedule, false)?;
    Ok(coef(like, steps, |s| schedule.posterior_log_variance_clipped(s))?.broadcast_as(like.shape())?.contiguous()?)
}

/// Model log variance from a raw output `v ∈ [−1, 1]`: interpolates between
/// the clipped posterior log variance (`v = −1`) and `log β` (`v = 1`).
pub fn model_log_variance(v: &Tensor, steps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    check_steps(steps, schedule, false)?;
    let min_log = coef(v, steps, |s| schedule.posterior_log_variance_clipped(s))?;
    let max_log = coef(v, steps, |s| schedule.beta(s).ln())?;
    let frac = ((v + 1.0)? * 0.5)?;
    let one_minus = frac.affine(-1.0, 1.0)?;
    Ok((frac.broadcast_mul(&max_log)? + one_minus.broadcast_mul(&min_log)?)?)
}

/// Elementwise KL(N(m1, e^lv1) ‖ N(m2, e^lv2)) in nats.
pub fn normal_kl(mean1: &Tensor, logvar1: &Tensor, mean2: &Tensor, logvar2: &Tensor) -> Result<Tensor> {
    let diff = (mean1 - mean2)?;
    let t = ((logvar2 - logvar1)? + (logvar1 - logvar2)?.exp()?)?;
    let t = (t + diff.sqr()?.mul(&logvar2.neg()?.exp()?)?)?;
    Ok(((t - 1.0)? * 0.5)?)
}

fn approx_standard_normal_cdf(x: &Tensor) -> Result<Tensor> {
    let inner = ((x + (x.powf(3.0)? * 0.044715)?)? * (2.0 / PI).sqrt())?;
    Ok(((inner.tanh()? + 1.0)? * 0.5)?)
}

/// Elementwise log-likelihood of data in [−1, 1] discretized to 256 bins.
pub fn discretized_gaussian_log_likelihood(x: &Tensor, means: &Tensor, log_scales: &Tensor) -> Result<Tensor> {
    let centered = (x - means)?;
    let inv_stdv = log_scales.neg()?.exp()?;
    let cdf_plus = approx_standard_normal_cdf(&((&centered + 1.0 / 255.0)? * &inv_stdv)?)?;
    let cdf_min = approx_standard_normal_cdf(&((&centered - 1.0 / 255.0)? * &inv_stdv)?)?;
    let log_cdf_plus = cdf_plus.clamp(1e-12, f64::INFINITY)?.log()?;
    let log_one_minus_cdf_min = cdf_min.affine(-1.0, 1.0)?.clamp(1e-12, f64::INFINITY)?.log()?;
    let log_delta = (&cdf_plus - &cdf_min)?.clamp(1e-12, f64::INFINITY)?.log()?;
    let low = x.lt(-0.999)?;
    let high = x.gt(0.999)?;
    let inner = high.where_cond(&log_one_minus_cdf_min, &log_delta)?;
    Ok(low.where_cond(&log_cdf_plus, &inner)?)
}

/// Variational bound term that trains the covariance head, in bits per element.
///
/// `model_mean` is detached, so gradients reach only `model_logvar`. Steps
/// equal to 1 use the discretized decoder likelihood; later steps the KL to
/// the forward posterior.
pub fn vlb_covariance_loss(
    x0: &Tensor,
    x_i: &Tensor,
    steps: &[usize],
    model_mean: &Tensor,
    model_logvar: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    check_steps(steps, schedule, false)?;
    same_shape(x0, x_i, "vlb x_i")?;
    same_shape(x0, model_mean, "vlb mean")?;
    same_shape(x0, model_logvar, "vlb logvar")?;
    let mean = model_mean.detach();
    let true_mean = posterior_mean(x0, x_i, steps, schedule)?;
    let true_logvar = posterior_log_variance(x0, steps, schedule)?;
    let kl = (normal_kl(&true_mean, &true_logvar, &mean, model_logvar)? / LN_2)?;
    if steps.iter().all(|&s| s > 1) {
        return Ok(kl.mean_all()?);
    }
    let nll = (discretized_gaussian_log_likelihood(x0, &mean, &(model_logvar * 0.5)?)?.neg()? / LN_2)?;
    let first = coef(x0, steps, |s| if s == 1 { 1.0 } else { 0.0 })?
        .broadcast_as(x0.shape())?
        .ne(0.0)?;
    Ok(first.where_cond(&nll, &kl)?.mean_all()?)
}

/// Deterministic DDIM update from step `from` to `to < from`.
pub fn ddim_step(x_i: &Tensor, eps: &Tensor, from: usize, to: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    ddim_step_with(x_i, eps, from, to, schedule, false)
}

/// DDIM update that optionally clamps the clean-data estimate to [−1, 1]
/// (re-deriving the noise estimate to match) before stepping.
pub fn ddim_step_with(
    x_i: &Tensor,
    eps: &Tensor,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
    clip: bool,
) -> Result<Tensor> {
    if to >= from {
        return Err(Error::Parameter(format!("ddim step must go down, got {from} -> {to}")));
    }
    schedule.check_step(from)?;
    same_shape(x_i, eps, "ddim eps")?;
    let ab = schedule.alpha_bar(from);
    let ab_to = schedule.alpha_bar(to);
    let mut x0 = ((x_i - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    let mut eps = eps.clone();
    if clip {
        x0 = x0.clamp(-1.0, 1.0)?;
        eps = ((x_i - (&x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
    }
    if to == 0 {
        return Ok(x0);
    }
    Ok(((x0 * ab_to.sqrt())? + (eps * (1.0 - ab_to).sqrt())?)?)
}
