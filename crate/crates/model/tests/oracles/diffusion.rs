//! Numeric checks of the forward process, the reverse updates and the
//! variational bound against closed forms.

use std::f64::consts::LN_2;

use candle_core::{DType, Device, Tensor};
use changen_core::rng::rng;
use changen_core::{make_sampling_steps, NoiseSchedule};
use changen_model::diffusion::*;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 2e-2).expect("valid schedule")
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn vec64(t: &Tensor) -> Result<Vec<f64>, String> {
    t.to_dtype(DType::F64).map_err(err)?.flatten_all().map_err(err)?.to_vec1().map_err(err)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64, String> {
    let (a, b) = (vec64(a)?, vec64(b)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Sample mean and variance of `perturb(x0, i, ε)` over `draws` noise draws
/// against `√ᾱ·x0` and `1 − ᾱ`; returns the worst relative errors.
pub fn check_perturb_moments(draws: usize) -> Result<(f64, f64), String> {
    let s = schedule();
    let dev = Device::Cpu;
    let x0_value = 2.0;
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for (k, step) in [10usize, 100, 250].into_iter().enumerate() {
        let x0 = Tensor::full(x0_value, draws, &dev).map_err(err)?;
        let noise = gaussian(&[draws], &mut rng(1000 + k as u64), DType::F64, &dev).map_err(err)?;
        let x = vec64(&perturb(&x0, &[step], &noise, &s).map_err(err)?)?;
        let mean = x.iter().sum::<f64>() / draws as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let ab = s.alpha_bar(step);
        let (m_true, v_true) = (ab.sqrt() * x0_value, 1.0 - ab);
        worst_mean = worst_mean.max((mean - m_true).abs() / m_true);
        worst_var = worst_var.max((var - v_true).abs() / v_true);
    }
    if worst_mean > 0.01 || worst_var > 0.02 {
        return Err(format!("mean error {worst_mean:.4}, variance error {worst_var:.4}"));
    }
    Ok((worst_mean, worst_var))
}

/// With the true noise, a DDIM step from `perturb(x0, i)` lands on
/// `perturb(x0, j)` and, at `j = 0`, on `x0` itself.
pub fn check_ddim_round_trip() -> Result<f64, String> {
    let s = schedule();
    let dev = Device::Cpu;
    let mut r = rng(5);
    let x0 = gaussian(&[4, 3, 8, 8], &mut r, DType::F64, &dev).map_err(err)?.clamp(-1.0, 1.0).map_err(err)?;
    let eps = gaussian(&[4, 3, 8, 8], &mut r, DType::F64, &dev).map_err(err)?;
    let mut worst = 0.0f64;
    for (from, to) in [(1000, 0), (500, 0), (1, 0), (700, 300), (20, 19)] {
        let x_i = perturb(&x0, &[from], &eps, &s).map_err(err)?;
        let target = perturb(&x0, &[to], &eps, &s).map_err(err)?;
        let stepped = ddim_step(&x_i, &eps, from, to, &s).map_err(err)?;
        worst = worst.max(max_abs_diff(&stepped, &target)?);
    }
    if worst > 1e-5 {
        return Err(format!("round trip off by {worst:e}"));
    }
    Ok(worst)
}

/// The bound vanishes when the model matches the forward posterior and
/// equals the closed-form Gaussian KL when the model variance is doubled.
pub fn check_vlb_closed_forms() -> Result<(f64, f64), String> {
    let s = schedule();
    let dev = Device::Cpu;
    let mut r = rng(9);
    let x0 = gaussian(&[2, 3, 4, 4], &mut r, DType::F64, &dev).map_err(err)?.clamp(-1.0, 1.0).map_err(err)?;
    let eps = gaussian(&[2, 3, 4, 4], &mut r, DType::F64, &dev).map_err(err)?;
    let mut worst_zero = 0.0f64;
    let mut worst_double = 0.0f64;
    // KL(N(m, v) ‖ N(m, 2v)) = (ln 2 − 1/2)/2 nats
    let doubled = 0.5 * (LN_2 - 0.5) / LN_2;
    for step in [2usize, 50, 999] {
        let steps = [step];
        let x_i = perturb(&x0, &steps, &eps, &s).map_err(err)?;
        let mean = posterior_mean(&x0, &x_i, &steps, &s).map_err(err)?;
        let logvar = posterior_log_variance(&x0, &steps, &s).map_err(err)?;
        let matched = vlb_covariance_loss(&x0, &x_i, &steps, &mean, &logvar, &s).map_err(err)?;
        worst_zero = worst_zero.max(matched.to_scalar::<f64>().map_err(err)?.abs());
        let wide = (&logvar + LN_2).map_err(err)?;
        let kl = vlb_covariance_loss(&x0, &x_i, &steps, &mean, &wide, &s).map_err(err)?;
        worst_double = worst_double.max((kl.to_scalar::<f64>().map_err(err)? - doubled).abs());
    }
    if worst_zero > 1e-8 || worst_double > 1e-8 {
        return Err(format!("matched {worst_zero:e}, doubled-variance error {worst_double:e}"));
    }
    Ok((worst_zero, worst_double))
}

/// DDIM with the exact noise predictor of a 1-D Gaussian N(μ, σ²): with
/// enough steps for the discretization error to stay under 5%, just
/// before the final update the samples follow the true noisy marginal, and
/// the final clean estimate matches the affine map the updates compose to.
pub fn check_analytic_ddim(samples: usize, sampling_steps: usize) -> Result<(f64, f64), String> {
    let s = schedule();
    let dev = Device::Cpu;
    let (mu, sigma) = (0.5f64, 0.3f64);
    let mut x = gaussian(&[samples], &mut rng(21), DType::F64, &dev).map_err(err)?;
    let steps = make_sampling_steps(sampling_steps, 1000).map_err(err)?;
    // x_final = a·x_T + b, tracked in scalar arithmetic.
    let (mut a, mut b) = (1.0f64, 0.0f64);
    let mut before_last = None;
    for (k, &from) in steps.iter().enumerate() {
        let to = steps.get(k + 1).copied().unwrap_or(0);
        if to == 0 {
            before_last = Some((vec64(&x)?, s.alpha_bar(from)));
        }
        let ab = s.alpha_bar(from);
        // ε*(x) = √(1−ᾱ)(x − √ᾱ μ)/(ᾱσ² + 1 − ᾱ)
        let scale = (1.0 - ab).sqrt() / (ab * sigma * sigma + 1.0 - ab);
        let eps = x.affine(scale, -scale * ab.sqrt() * mu).map_err(err)?;
        x = ddim_step(&x, &eps, from, to, &s).map_err(err)?;

        let (ea, eb) = (scale * a, scale * (b - ab.sqrt() * mu));
        let (x0a, x0b) = ((a - (1.0 - ab).sqrt() * ea) / ab.sqrt(), (b - (1.0 - ab).sqrt() * eb) / ab.sqrt());
        if to == 0 {
            (a, b) = (x0a, x0b);
        } else {
            let ab_to = s.alpha_bar(to);
            a = ab_to.sqrt() * x0a + (1.0 - ab_to).sqrt() * ea;
            b = ab_to.sqrt() * x0b + (1.0 - ab_to).sqrt() * eb;
        }
    }
    let moments = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (mean, var.sqrt())
    };
    let (pre, ab) = before_last.ok_or("no final step")?;
    let (pm, ps) = moments(&pre);
    let (want_m, want_s) = (ab.sqrt() * mu, (ab * sigma * sigma + 1.0 - ab).sqrt());
    let marginal = ((pm - want_m).abs() / want_m).max((ps - want_s).abs() / want_s);
    if marginal > 0.05 {
        return Err(format!("noisy marginal mean {pm:.4} std {ps:.4}, want {want_m:.4} {want_s:.4}"));
    }
    let (fm, fs) = moments(&vec64(&x)?);
    let composed = ((fm - b).abs() / b.abs()).max((fs - a.abs()).abs() / a.abs());
    if composed > 0.05 {
        return Err(format!("final mean {fm:.4} std {fs:.4}, composed map gives {b:.4} {:.4}", a.abs()));
    }
    Ok((marginal, composed))
}
