//! Contracts of masked change sampling checked against a random-weight
//! denoiser: cell-exact mixing, λ=0 independence and guided-step counts.

use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use changen_core::procedural::{gen_procedural_scene, SceneSpec};
use changen_core::rng::rng;
use changen_core::{simulate_event, Condition, EventSpec};
use changen_model::condition::ConditionEncoding;
use changen_model::diffusion::{gaussian, perturb};
use changen_model::model::{ChangeModel, ModelSpec, NoisePredictor};
use changen_model::sampler::{GuidanceConfig, Sampler, SynthesisRequest};
use changen_model::Result;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Forwards to a real denoiser and records every latent it is shown.
pub struct Spy<'a> {
    pub inner: &'a ChangeModel,
    pub inputs: Mutex<Vec<Tensor>>,
}

impl NoisePredictor for Spy<'_> {
    fn predict_eps(&self, x: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.inputs.lock().unwrap().push(x.clone());
        self.inner.predict_eps(x, steps, cond)
    }

    fn condition_channels(&self) -> usize {
        self.inner.condition_channels()
    }
}

/// Tiny denoiser with every weight redrawn so its predictions depend on
/// all of its inputs.
pub fn random_model(seed: u64) -> std::result::Result<ChangeModel, String> {
    let model = ChangeModel::new(
        ModelSpec::tiny(ConditionEncoding::Semantic { num_classes: 4 }),
        seed,
        &Device::Cpu,
    )
    .map_err(err)?;
    let mut r = rng(seed ^ 0x5eed);
    for var in model.vars() {
        let t = (gaussian(var.dims(), &mut r, DType::F32, &Device::Cpu).map_err(err)? * 0.05).map_err(err)?;
        var.set(&t).map_err(err)?;
    }
    Ok(model)
}

fn spy(model: &ChangeModel) -> Spy<'_> {
    Spy { inner: model, inputs: Mutex::new(Vec::new()) }
}

fn sampler<'a>(model: &'a ChangeModel, spy: &'a Spy<'a>) -> Sampler<'a> {
    let mut s = Sampler::from_model(model);
    s.denoiser = spy;
    s
}

fn scene_spec() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        num_classes: 4,
        object_count_range: (3, 6),
        object_size_range: (4, 9),
        ..Default::default()
    }
}

fn request(seed: u64, guidance: GuidanceConfig) -> std::result::Result<SynthesisRequest, String> {
    let scene = gen_procedural_scene(&scene_spec(), seed).map_err(err)?;
    let pre = Condition::Semantic(scene.mask.clone());
    let out = simulate_event(&pre, &scene.instances, &EventSpec::create(0.6, seed)).map_err(err)?;
    Ok(SynthesisRequest {
        pre_image: scene.image,
        pre_condition: pre,
        post_condition: out.next,
        change: out.change,
        guidance,
    })
}

/// In a guided step the denoiser sees exactly the forward-perturbed
/// pre-event latent on every unchanged cell and the running latent on
/// every changed cell. Returns the number of cells checked.
pub fn check_guided_mixing(trials: u64) -> std::result::Result<usize, String> {
    let model = random_model(1)?;
    let s = model.schedule();
    let dev = Device::Cpu;
    let mut checked = 0;
    for trial in 0..trials {
        let sp = spy(&model);
        let smp = sampler(&model, &sp);
        let mut r = rng(100 + trial);
        let shape = [2, 48, 8, 8];
        let x_post = gaussian(&shape, &mut r, DType::F32, &dev).map_err(err)?;
        let x_pre0 = gaussian(&shape, &mut r, DType::F32, &dev).map_err(err)?;
        let noise = gaussian(&shape, &mut r, DType::F32, &dev).map_err(err)?;
        let bits: Vec<f32> = (0..128).map(|i| (i * 7 + trial as usize).is_multiple_of(3) as u8 as f32).collect();
        let change = Tensor::from_vec(bits.clone(), (2, 1, 8, 8), &dev).map_err(err)?;
        let cond = Tensor::zeros((2, 4, 32, 32), DType::F32, &dev).map_err(err)?;
        let from = 900 - 37 * trial as usize;
        smp.masked_change_step(&x_post, &x_pre0, &change, from, from - 20, Some(&noise), &cond, true)
            .map_err(err)?;
        let flat = |t: &Tensor| t.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(err);
        let seen = flat(&sp.inputs.lock().unwrap()[0])?;
        let perturbed = flat(&perturb(&x_pre0, &[from, from], &noise, s).map_err(err)?)?;
        let (post, pre, eps) = (flat(&x_post)?, flat(&x_pre0)?, flat(&noise)?);
        let (a, b) = (s.alpha_bar(from).sqrt(), (1.0 - s.alpha_bar(from)).sqrt());
        for i in 0..seen.len() {
            let cell = (i / (48 * 64)) * 64 + i % 64;
            if bits[cell] == 0.0 {
                let independent = a * f64::from(pre[i]) + b * f64::from(eps[i]);
                if seen[i] != perturbed[i] || (f64::from(seen[i]) - independent).abs() > 1e-5 {
                    return Err(format!("unchanged cell {i}: saw {}, want {}", seen[i], perturbed[i]));
                }
            } else if seen[i] != post[i] {
                return Err(format!("changed cell {i}: saw {}, want {}", seen[i], post[i]));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// With λ=0 the output is bitwise independent of the pre-event image under
/// paired seeds, while λ=1 depends on it.
pub fn check_lambda_zero_independence(pairs: u64) -> std::result::Result<(), String> {
    let model = random_model(2)?;
    let smp = Sampler::from_model(&model);
    let other = gen_procedural_scene(&scene_spec(), 9_999).map_err(err)?.image;
    for seed in 0..pairs {
        let a = request(seed, GuidanceConfig::new(0.0, 10, 500 + seed))?;
        let mut b = a.clone();
        b.pre_image = other.clone();
        let (oa, ob) = (smp.synthesize_post_event(&a).map_err(err)?, smp.synthesize_post_event(&b).map_err(err)?);
        if oa.image != ob.image {
            return Err(format!("seed {seed}: λ=0 output depends on the pre-event image"));
        }
        let (mut ga, mut gb) = (a, b);
        ga.guidance.lambda = 1.0;
        gb.guidance.lambda = 1.0;
        if smp.synthesize_post_event(&ga).map_err(err)?.image == smp.synthesize_post_event(&gb).map_err(err)?.image {
            return Err(format!("seed {seed}: λ=1 output ignores the pre-event image"));
        }
    }
    Ok(())
}

/// `⌊λT⌋` guided steps out of `T` denoiser calls.
pub fn check_guided_counts() -> std::result::Result<(), String> {
    let model = random_model(3)?;
    for (lambda, want) in [(0.0, 0), (0.3, 15), (0.5, 25), (1.0, 50)] {
        let sp = spy(&model);
        let smp = sampler(&model, &sp);
        let out = smp.synthesize_post_event(&request(4, GuidanceConfig::new(lambda, 50, 8))?).map_err(err)?;
        let calls = sp.inputs.lock().unwrap().len();
        if out.guided_steps != want || out.total_steps != 50 || calls != 50 {
            return Err(format!(
                "λ={lambda}: {} guided of {} ({calls} calls), want {want} of 50",
                out.guided_steps, out.total_steps
            ));
        }
    }
    Ok(())
}
