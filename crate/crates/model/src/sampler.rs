//! Masked change diffusion: post-event synthesis from a pre-event image, the
//! simulated post-event condition and the change mask, chained into series.
//!
//! At each of the first `⌊λT⌋` DDIM steps (the highest-noise end) the
//! unchanged region of the current latent is replaced by a freshly perturbed
//! copy of the pre-event latent before denoising.

use candle_core::{DType, Device, Tensor};
use changen_core::dataset::{Provenance, TimeSeriesSample};
use changen_core::procedural::render_mask;
use changen_core::rng::{derive_seed, derive_stream, rng, StageRng};
use changen_core::schedule::guided_step_count;
use changen_core::{
    change_mask_of, make_sampling_steps, simulate_event, ChangeMask, Condition, Connectivity, EventKind, EventSpec,
    InstanceMap, NoiseSchedule, RgbImage,
};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::condition::{image_to_tensor, mask_to_tensor, tensor_to_image, ConditionEncoding};
use crate::diffusion::{ddim_step_with, gaussian, perturb};
use crate::error::{Error, Result};
use crate::model::{ChangeModel, NoisePredictor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Fraction of sampling steps that mix in the pre-event latent.
    pub lambda: f64,
    /// Number of DDIM steps `T`.
    pub steps: usize,
    pub seed: u64,
    /// Clamp each clean-data estimate to [−1, 1] while sampling.
    #[serde(default = "default_clip")]
    pub clip_denoised: bool,
}

fn default_clip() -> bool {
    true
}

impl GuidanceConfig {
    pub fn new(lambda: f64, steps: usize, seed: u64) -> Self {
        Self {
            lambda,
            steps,
            seed,
            clip_denoised: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Parameter(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.steps == 0 {
            return Err(Error::Parameter("at least one sampling step is needed".into()));
        }
        Ok(())
    }

    pub fn guided_steps(&self) -> usize {
        guided_step_count(self.lambda, self.steps)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisRequest {
    pub pre_image: RgbImage,
    pub pre_condition: Condition,
    pub post_condition: Condition,
    pub change: ChangeMask,
    pub guidance: GuidanceConfig,
}

impl SynthesisRequest {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        let shape = self.pre_image.shape();
        if self.pre_condition.shape() != shape || self.post_condition.shape() != shape || self.change.shape() != shape {
            return Err(Error::Dimension("request rasters differ in size".into()));
        }
        if let (Condition::Semantic(a), Condition::Semantic(b)) = (&self.pre_condition, &self.post_condition) {
            if change_mask_of(a, b)? != self.change {
                return Err(Error::Validation("change mask disagrees with the two conditions".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutput {
    pub image: RgbImage,
    /// Steps that applied pre-event mixing.
    pub guided_steps: usize,
    pub total_steps: usize,
}

/// Anything that can render post-event images for a batch of requests.
pub trait ChangeSynthesizer: Sync {
    fn synthesize_batch(&self, requests: &[SynthesisRequest]) -> Result<Vec<SynthesisOutput>>;
}

/// `C·x_post + (1 − C)·x_pre`, with `C` broadcast over channels.
pub fn mix_latents(x_post: &Tensor, x_pre: &Tensor, change: &Tensor) -> Result<Tensor> {
    let keep = change.affine(-1.0, 1.0)?;
    Ok((x_post.broadcast_mul(change)? + x_pre.broadcast_mul(&keep)?)?)
}

pub struct Sampler<'a> {
    pub denoiser: &'a dyn NoisePredictor,
    pub codec: &'a dyn Codec,
    pub schedule: &'a NoiseSchedule,
    pub encoding: ConditionEncoding,
    pub dtype: DType,
    pub device: Device,
}

impl<'a> Sampler<'a> {
    pub fn from_model(model: &'a ChangeModel) -> Self {
        Self {
            denoiser: model,
            codec: model.codec(),
            schedule: model.schedule(),
            encoding: model.encoding(),
            dtype: model.dtype(),
            device: model.device().clone(),
        }
    }

    /// One sampling step from `from` to `to`. When `pre_noise` is given the
    /// step is guided: the unchanged region of `x_post` is first replaced by
    /// `perturb(x_pre0, from, pre_noise)`.
    #[allow(clippy::too_many_arguments)]
    pub fn masked_change_step(
        &self,
        x_post: &Tensor,
        x_pre0: &Tensor,
        change: &Tensor,
        from: usize,
        to: usize,
        pre_noise: Option<&Tensor>,
        cond: &Tensor,
        clip: bool,
    ) -> Result<Tensor> {
        if x_post.dims() != x_pre0.dims() {
            return Err(Error::Dimension(format!("{:?} vs {:?}", x_post.dims(), x_pre0.dims())));
        }
        let x = match pre_noise {
            Some(noise) => {
                let x_pre = perturb(x_pre0, &[from], noise, self.schedule)?;
                mix_latents(x_post, &x_pre, change)?
            }
            None => x_post.clone(),
        };
        let eps = self.denoiser.predict_eps(&x, &[from], cond)?;
        ddim_step_with(&x, &eps, from, to, self.schedule, clip)
    }

    pub fn synthesize_post_event(&self, req: &SynthesisRequest) -> Result<SynthesisOutput> {
        Ok(self.run(std::slice::from_ref(req))?.remove(0))
    }

    fn run(&self, requests: &[SynthesisRequest]) -> Result<Vec<SynthesisOutput>> {
        let Some(first) = requests.first() else {
            return Ok(Vec::new());
        };
        if self.denoiser.condition_channels() != self.encoding.channels() {
            return Err(Error::Config("denoiser and encoding disagree on condition channels".into()));
        }
        let t = first.guidance.steps;
        let clip = first.guidance.clip_denoised;
        for r in requests {
            r.validate()?;
            if r.guidance.steps != t || r.pre_image.shape() != first.pre_image.shape() || r.guidance.clip_denoised != clip {
                return Err(Error::Parameter("batched requests must share size, step count and clipping".into()));
            }
        }
        let probe = first.pre_image.shape();
        let (dtype, device) = (self.dtype, &self.device);
        let pre_images = requests
            .iter()
            .map(|r| image_to_tensor(&r.pre_image, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        let x_pre0 = self.codec.encode(&Tensor::cat(&pre_images, 0)?)?;
        let changes = requests
            .iter()
            .map(|r| self.codec.encode_mask(&mask_to_tensor(&r.change, dtype, device)?, 3))
            .collect::<Result<Vec<_>>>()?;
        let change = Tensor::cat(&changes, 0)?;
        let ones = change.ones_like()?;
        let conds = requests.iter().map(|r| &r.post_condition).collect::<Vec<_>>();
        let cond = self.encoding.encode_batch(&conds, dtype, device)?;
        let latent_dims = x_pre0.dims()[1..].to_vec();

        let mut rngs: Vec<StageRng> = requests.iter().map(|r| rng(r.guidance.seed)).collect();
        let init = rngs
            .iter_mut()
            .map(|r| gaussian(&[&[1], latent_dims.as_slice()].concat(), r, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        let mut x = Tensor::cat(&init, 0)?;
        let steps = make_sampling_steps(t, self.schedule.num_train_steps())?;
        let guided: Vec<usize> = requests.iter().map(|r| r.guidance.guided_steps()).collect();
        let mut counters = vec![0usize; requests.len()];
        for (k, &from) in steps.iter().enumerate() {
            let to = steps.get(k + 1).copied().unwrap_or(0);
            let any_guided = guided.iter().any(|&g| k < g);
            let (noise, mask) = if any_guided {
                let mut noises = Vec::with_capacity(requests.len());
                let mut masks = Vec::with_capacity(requests.len());
                for (j, r) in rngs.iter_mut().enumerate() {
                    if k < guided[j] {
                        noises.push(gaussian(&[&[1], latent_dims.as_slice()].concat(), r, dtype, device)?);
                        masks.push(change.get(j)?.unsqueeze(0)?);
                        counters[j] += 1;
                    } else {
                        // unguided rows keep their own latent: C = 1
                        noises.push(Tensor::zeros([&[1], latent_dims.as_slice()].concat(), dtype, device)?);
                        masks.push(ones.get(j)?.unsqueeze(0)?);
                    }
                }
                (Some(Tensor::cat(&noises, 0)?), Tensor::cat(&masks, 0)?)
            } else {
                (None, ones.clone())
            };
            // detach so the weights' autograd graph does not chain across steps
            x = self.masked_change_step(&x, &x_pre0, &mask, from, to, noise.as_ref(), &cond, clip)?.detach();
        }
        let images = self.codec.decode(&x.clamp(-1.0, 1.0)?)?;
        let mut out = Vec::with_capacity(requests.len());
        for (j, _) in requests.iter().enumerate() {
            let image = tensor_to_image(&images.get(j)?)?;
            debug_assert_eq!(image.shape(), probe);
            out.push(SynthesisOutput {
                image,
                guided_steps: counters[j],
                total_steps: t,
            });
        }
        Ok(out)
    }
}

impl ChangeSynthesizer for Sampler<'_> {
    fn synthesize_batch(&self, requests: &[SynthesisRequest]) -> Result<Vec<SynthesisOutput>> {
        self.run(requests)
    }
}

/// Renders post-event images straight from the procedural palette with a
/// fresh texture; a non-learned stand-in for real imagery.
pub struct ProceduralRenderer;

impl ChangeSynthesizer for ProceduralRenderer {
    fn synthesize_batch(&self, requests: &[SynthesisRequest]) -> Result<Vec<SynthesisOutput>> {
        requests
            .iter()
            .map(|r| {
                r.validate()?;
                let Condition::Semantic(mask) = &r.post_condition else {
                    return Err(Error::Config("procedural rendering needs semantic conditions".into()));
                };
                let instances = InstanceMap::from_semantic(mask, Connectivity::Eight);
                Ok(SynthesisOutput {
                    image: render_mask(mask, &instances, derive_stream(r.guidance.seed, "render")),
                    guided_steps: 0,
                    total_steps: 0,
                })
            })
            .collect()
    }
}

/// Starting state of a series to synthesize.
#[derive(Clone, Debug)]
pub struct SeriesStart {
    pub image: RgbImage,
    pub condition: Condition,
    pub instances: InstanceMap,
    pub events: Vec<EventSpec>,
    pub guidance: GuidanceConfig,
    /// Seeds recorded into the sample's provenance.
    pub sample_seed: u64,
    pub scene_seed: u64,
}

/// Chains event simulation and synthesis for a batch of series; step `k` of
/// every series is synthesized in one batch, each generated image becoming
/// the next pre-event image.
pub fn synthesize_series_batch(synth: &dyn ChangeSynthesizer, starts: &[SeriesStart]) -> Result<Vec<TimeSeriesSample>> {
    let Some(first) = starts.first() else {
        return Ok(Vec::new());
    };
    let n = first.events.len();
    if n == 0 || starts.iter().any(|s| s.events.len() != n) {
        return Err(Error::Parameter("series in a batch need the same non-zero event count".into()));
    }
    struct State {
        images: Vec<RgbImage>,
        conditions: Vec<Condition>,
        changes: Vec<ChangeMask>,
        instances: InstanceMap,
        prov: Provenance,
    }
    let mut states: Vec<State> = starts
        .iter()
        .map(|s| State {
            images: vec![s.image.clone()],
            conditions: vec![s.condition.clone()],
            changes: Vec::new(),
            instances: s.instances.clone(),
            prov: Provenance {
                sample_seed: s.sample_seed,
                scene_seed: s.scene_seed,
                guidance_lambda: s.guidance.lambda,
                sampling_steps: s.guidance.steps,
                ..Default::default()
            },
        })
        .collect();
    for k in 0..n {
        let mut requests = Vec::with_capacity(starts.len());
        for (start, state) in starts.iter().zip(states.iter_mut()) {
            let spec = &start.events[k];
            let outcome = simulate_event(state.conditions.last().expect("non-empty"), &state.instances, spec)?;
            let noise_seed = derive_seed(start.guidance.seed, k as u64);
            requests.push(SynthesisRequest {
                pre_image: state.images.last().expect("non-empty").clone(),
                pre_condition: state.conditions.last().expect("non-empty").clone(),
                post_condition: outcome.next.clone(),
                change: outcome.change.clone(),
                guidance: start.guidance.with_seed(noise_seed),
            });
            state.prov.event_seeds.push(spec.rng_seed);
            state.prov.event_kinds.push(spec.kind);
            state.prov.noise_seeds.push(noise_seed);
            state.prov.logs.push(outcome.log);
            if spec.kind == EventKind::ContourRemove {
                state.prov.dilation_radius = Some(spec.dilation_radius.unwrap_or(1));
            }
            state.conditions.push(outcome.next);
            state.changes.push(outcome.change);
            state.instances = outcome.next_instances;
        }
        let outputs = synth.synthesize_batch(&requests)?;
        for (state, out) in states.iter_mut().zip(outputs) {
            state.images.push(out.image);
        }
    }
    states
        .into_iter()
        .map(|s| Ok(TimeSeriesSample::new(s.images, s.conditions, s.changes, s.prov)?))
        .collect()
}

pub fn synthesize_time_series(synth: &dyn ChangeSynthesizer, start: &SeriesStart) -> Result<TimeSeriesSample> {
    Ok(synthesize_series_batch(synth, std::slice::from_ref(start))?.remove(0))
}
