//! Denoiser training on procedural scenes.

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use changen_core::procedural::{gen_procedural_scene, SceneSpec};
use changen_core::rng::{derive_seed, derive_stream, rng};
use changen_core::{extract_contours, Condition};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::condition::{image_to_tensor, ConditionEncoding};
use crate::diffusion::gaussian;
use crate::error::{Error, Result};
use crate::model::ChangeModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub scene: SceneSpec,
    pub log_every: usize,
    /// Size of the fixed batch used to measure the noise-prediction loss.
    pub eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 3e-4,
            seed: 0,
            scene: SceneSpec::default(),
            log_every: 50,
            eval_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub mse: f64,
    pub vb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    pub eval_before: f64,
    pub eval_after: f64,
}

/// Condition of a procedural scene under `encoding`.
pub fn scene_condition(scene: &changen_core::procedural::ProceduralScene, encoding: ConditionEncoding) -> Condition {
    match encoding {
        ConditionEncoding::Semantic { .. } => Condition::Semantic(scene.mask.clone()),
        ConditionEncoding::Contour => Condition::Contour(extract_contours(&scene.instances)),
    }
}

/// Images and encoded conditions for the scenes with the given seeds.
pub fn scene_batch(model: &ChangeModel, spec: &SceneSpec, seeds: &[u64]) -> Result<(Tensor, Tensor)> {
    let (dtype, device) = (model.dtype(), model.device().clone());
    let mut images = Vec::with_capacity(seeds.len());
    let mut conds = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let scene = gen_procedural_scene(spec, seed)?;
        images.push(image_to_tensor(&scene.image, dtype, &device)?);
        conds.push(model.encoding().encode(&scene_condition(&scene, model.encoding()), dtype, &device)?);
    }
    Ok((Tensor::cat(&images, 0)?, Tensor::cat(&conds, 0)?))
}

/// Fixed scenes, timesteps and noise for comparing the loss across training.
pub struct EvalBatch {
    images: Tensor,
    conds: Tensor,
    steps: Vec<usize>,
    noise: Tensor,
}

impl EvalBatch {
    pub fn new(model: &ChangeModel, spec: &SceneSpec, size: usize, seed: u64) -> Result<Self> {
        let root = derive_stream(seed, "eval-scenes");
        let seeds: Vec<u64> = (0..size as u64).map(|i| derive_seed(root, i)).collect();
        let (images, conds) = scene_batch(model, spec, &seeds)?;
        let n = model.schedule().num_train_steps();
        let steps: Vec<usize> = (0..size).map(|i| 1 + (i * n + n / 2) / size.max(1)).map(|s| s.min(n)).collect();
        let latent = model.codec().encode(&images)?;
        let noise = gaussian(latent.dims(), &mut rng(derive_stream(seed, "eval-noise")), model.dtype(), model.device())?;
        Ok(Self {
            images,
            conds,
            steps,
            noise,
        })
    }

    /// Noise-prediction MSE on this batch.
    pub fn simple_loss(&self, model: &ChangeModel) -> Result<f64> {
        let (mse, _) = model.training_losses(&self.images, &self.conds, &self.steps, &self.noise)?;
        Ok(mse.to_dtype(candle_core::DType::F64)?.to_scalar()?)
    }
}

/// Trains `model` in place with AdamW on `mse + vb`; returns the loss log.
pub fn train(model: &mut ChangeModel, cfg: &TrainConfig, mut on_log: impl FnMut(&LossRecord)) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be positive".into()));
    }
    cfg.scene.validate()?;
    let eval = EvalBatch::new(model, &cfg.scene, cfg.eval_size.max(1), cfg.seed)?;
    let eval_before = eval.simple_loss(model)?;
    let mut opt = AdamW::new(
        model.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let scene_root = derive_stream(cfg.seed, "train-scenes");
    let n = model.schedule().num_train_steps();
    let mut records = Vec::new();
    let (mut acc_mse, mut acc_vb, mut acc_n) = (0.0, 0.0, 0usize);
    for _ in 0..cfg.steps {
        let step = model.step;
        let mut r = rng(derive_seed(derive_stream(cfg.seed, "train-step"), step));
        let seeds: Vec<u64> = (0..cfg.batch_size as u64)
            .map(|j| derive_seed(scene_root, step * cfg.batch_size as u64 + j))
            .collect();
        let (images, conds) = scene_batch(model, &cfg.scene, &seeds)?;
        let steps: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(1..=n)).collect();
        let latent_shape = model.codec().encode(&images)?.dims().to_vec();
        let noise = gaussian(&latent_shape, &mut r, model.dtype(), model.device())?;
        let (mse, vb) = model.training_losses(&images, &conds, &steps, &noise)?;
        let loss = match &vb {
            Some(vb) => (&mse + vb)?,
            None => mse.clone(),
        };
        opt.backward_step(&loss)?;
        acc_mse += mse.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        acc_vb += match vb {
            Some(vb) => vb.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?,
            None => 0.0,
        };
        acc_n += 1;
        model.step += 1;
        if cfg.log_every > 0 && model.step.is_multiple_of(cfg.log_every as u64) {
            let rec = LossRecord {
                step: model.step,
                mse: acc_mse / acc_n as f64,
                vb: acc_vb / acc_n as f64,
            };
            on_log(&rec);
            records.push(rec);
            (acc_mse, acc_vb, acc_n) = (0.0, 0.0, 0);
        }
    }
    let eval_after = eval.simple_loss(model)?;
    Ok(TrainReport {
        records,
        eval_before,
        eval_after,
    })
}
