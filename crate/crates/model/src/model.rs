//! The complete change synthesizer: codec, denoiser, schedule and condition
//! encoding, plus its checkpoint format.
//!
//! Checkpoints use the shared container with header `rsdit-v1`; the
//! metadata line carries the model spec and training step.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use changen_core::{NoiseSchedule, ScheduleConfig};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::{Codec, SpaceToDepth};
use crate::condition::ConditionEncoding;
use crate::diffusion;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rsdit::{DenoiserConfig, RsDit, DENSE_EMBED_FACTOR};

pub const CHECKPOINT_HEADER: &str = "rsdit-v1";

/// Everything needed to rebuild a model except its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub denoiser: DenoiserConfig,
    pub codec_factor: usize,
    pub schedule: ScheduleConfig,
    pub encoding: ConditionEncoding,
}

impl ModelSpec {
    /// Desk-scale model for the given condition encoding.
    pub fn desk(encoding: ConditionEncoding) -> Self {
        Self {
            denoiser: DenoiserConfig::desk(encoding.channels(), 48),
            codec_factor: 4,
            schedule: ScheduleConfig::default(),
            encoding,
        }
    }

    pub fn tiny(encoding: ConditionEncoding) -> Self {
        Self {
            denoiser: DenoiserConfig::tiny(encoding.channels(), 48),
            ..Self::desk(encoding)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.codec_factor * self.denoiser.patch_size != DENSE_EMBED_FACTOR {
            return Err(Error::Config(format!(
                "codec factor {} times patch size {} must equal the condition embedding factor {DENSE_EMBED_FACTOR}",
                self.codec_factor, self.denoiser.patch_size
            )));
        }
        if self.denoiser.in_channels != 3 * self.codec_factor * self.codec_factor {
            return Err(Error::Config("denoiser input channels must match the codec".into()));
        }
        if self.denoiser.condition_channels != self.encoding.channels() {
            return Err(Error::Config("condition channels must match the encoding".into()));
        }
        Ok(())
    }
}

/// Predicts the noise in a latent given timesteps and a dense condition.
pub trait NoisePredictor: Send + Sync {
    fn predict_eps(&self, x: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor>;
    fn condition_channels(&self) -> usize;
}

pub struct ChangeModel {
    spec: ModelSpec,
    net: RsDit,
    codec: SpaceToDepth,
    schedule: NoiseSchedule,
    vars: BTreeMap<String, Var>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl ChangeModel {
    pub fn new(spec: ModelSpec, seed: u64, device: &Device) -> Result<Self> {
        Self::with_dtype(spec, seed, DType::F32, device)
    }

    pub fn with_dtype(spec: ModelSpec, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate()?;
        let store = ParamStore::new(seed, dtype, device);
        let net = RsDit::new(&store.root(), &spec.denoiser)?;
        Ok(Self {
            codec: SpaceToDepth::new(spec.codec_factor)?,
            schedule: NoiseSchedule::new(spec.schedule.clone())?,
            vars: store.named(),
            net,
            spec,
            step: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn net(&self) -> &RsDit {
        &self.net
    }

    pub fn codec(&self) -> &SpaceToDepth {
        &self.codec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn encoding(&self) -> ConditionEncoding {
        self.spec.encoding
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn device(&self) -> &Device {
        self.vars.values().next().map(|v| v.device()).unwrap_or(&Device::Cpu)
    }

    pub fn dtype(&self) -> DType {
        self.vars.values().next().map(|v| v.dtype()).unwrap_or(DType::F32)
    }

    /// Per-batch training terms `(mse, vb)` for clean images `B×3×H×W`.
    pub fn training_losses(
        &self,
        images: &Tensor,
        cond: &Tensor,
        steps: &[usize],
        noise: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let x0 = self.codec.encode(images)?;
        let x_t = diffusion::perturb(&x0, steps, noise, &self.schedule)?;
        let (eps, v) = self.net.forward_split(&x_t, steps, cond)?;
        let mse = diffusion::simple_loss(&eps, noise)?;
        let vb = match v {
            Some(v) => {
                let x0_pred = diffusion::predict_x0(&x_t, &eps.detach(), steps, &self.schedule)?;
                let mean = diffusion::posterior_mean(&x0_pred, &x_t, steps, &self.schedule)?;
                let logvar = diffusion::model_log_variance(&v, steps, &self.schedule)?;
                Some(diffusion::vlb_covariance_loss(&x0, &x_t, steps, &mean, &logvar, &self.schedule)?)
            }
            None => None,
        };
        Ok((mse, vb))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            spec: self.spec.clone(),
            step: self.step,
        };
        checkpoint::write(path, CHECKPOINT_HEADER, &meta, &self.vars)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let loaded = checkpoint::read::<CheckpointMeta>(path, CHECKPOINT_HEADER)?;
        let mut model = Self::new(loaded.meta.spec.clone(), 0, device)?;
        model.step = loaded.meta.step;
        loaded.assign(&model.vars)?;
        Ok(model)
    }
}

impl NoisePredictor for ChangeModel {
    fn predict_eps(&self, x: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward_split(x, steps, cond)?.0)
    }

    fn condition_channels(&self) -> usize {
        self.spec.denoiser.condition_channels
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    spec: ModelSpec,
    step: u64,
}
