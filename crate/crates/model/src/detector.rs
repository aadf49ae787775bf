//! A deliberately small Siamese change detector used to judge generated
//! data: one shared encoder per date, temporal-difference fusion, and a
//! per-pixel change logit.
//!
//! Images are folded by space-to-depth so all convolutions run at 1/4
//! resolution; the head predicts the 4×4 pixel logits of each cell.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use changen_core::augment::D4;
use changen_core::dataset::{read_sample, DatasetManifest};
use changen_core::metrics::{ChangeCounts, RandomBaselines};
use changen_core::rng::{derive_seed, derive_stream, rng};
use changen_core::{BinaryChangeMetrics, BinaryGrid, ChangeMask, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::{depth_to_space, space_to_depth};
use crate::condition::{image_to_tensor, mask_to_tensor};
use crate::error::{Error, Result};
use crate::layers::{linear, ChannelNorm, Conv3, Linear};
use crate::params::ParamStore;

pub const DETECTOR_HEADER: &str = "siamese-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub width: usize,
    /// 3×3 conv layers in the shared encoder.
    pub depth: usize,
    pub fold: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub d4: bool,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            width: 32,
            depth: 2,
            fold: 4,
            steps: 5000,
            batch_size: 8,
            learning_rate: 1e-3,
            d4: true,
            seed: 0,
            log_every: 50,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.fold == 0 || self.batch_size == 0 {
            return Err(Error::Config("width, fold and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One bitemporal training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangePair {
    pub pre: RgbImage,
    pub post: RgbImage,
    pub change: ChangeMask,
    pub scene_seed: u64,
}

impl ChangePair {
    pub fn transformed(&self, t: D4) -> Self {
        Self {
            pre: t.apply_image(&self.pre),
            post: t.apply_image(&self.post),
            change: ChangeMask::new(t.apply_grid(self.change.grid())),
            scene_seed: self.scene_seed,
        }
    }

    /// The same pair in reverse time order; the change mask is symmetric.
    pub fn swapped(&self) -> Self {
        Self {
            pre: self.post.clone(),
            post: self.pre.clone(),
            ..self.clone()
        }
    }
}

/// Every consecutive `(t_k, t_{k+1})` pair of a dataset.
pub fn load_pairs(root: &Path) -> Result<(DatasetManifest, Vec<ChangePair>)> {
    let manifest = DatasetManifest::load(root)?;
    let mut pairs = Vec::new();
    for record in &manifest.records {
        let sample = read_sample(&manifest.sample_dir(root, record))?;
        for (k, change) in sample.change_masks.iter().enumerate() {
            pairs.push(ChangePair {
                pre: sample.images[k].clone(),
                post: sample.images[k + 1].clone(),
                change: change.clone(),
                scene_seed: record.scene_seed,
            });
        }
    }
    Ok((manifest, pairs))
}

struct ConvLayer {
    conv: Conv3,
    norm: ChannelNorm,
}

impl ConvLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::silu(&self.norm.forward(&self.conv.forward(x)?)?)?)
    }
}

pub struct SiameseDetector {
    config: DetectorConfig,
    vars: std::collections::BTreeMap<String, Var>,
    stem: Linear,
    encoder: Vec<ConvLayer>,
    fuse: ConvLayer,
    head: Linear,
    pub step: u64,
    /// Scene seeds seen in training; the leak guard checks eval sets against them.
    pub train_scene_seeds: BTreeSet<u64>,
    pub dataset_name: Option<String>,
}

impl SiameseDetector {
    pub fn new(config: DetectorConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, DType::F32, device);
        let root = store.root();
        let f2 = config.fold * config.fold;
        let folded = 3 * f2;
        let w = config.width;
        let stem = linear(&root.pp("stem"), folded, w)?;
        let encoder = (0..config.depth)
            .map(|i| {
                let p = root.pp(&format!("encoder.{i}"));
                Ok(ConvLayer {
                    conv: Conv3::new(&p.pp("conv"), w, w, 1, 1)?,
                    norm: ChannelNorm::new(&p.pp("norm"), w)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fp = root.pp("fuse");
        let fuse = ConvLayer {
            conv: Conv3::new(&fp.pp("conv"), 3 * w + folded, w, 1, 1)?,
            norm: ChannelNorm::new(&fp.pp("norm"), w)?,
        };
        let head = linear(&root.pp("head"), w, f2)?;
        Ok(Self {
            config,
            vars: store.named(),
            stem,
            encoder,
            fuse,
            head,
            step: 0,
            train_scene_seeds: BTreeSet::new(),
            dataset_name: None,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// `B×3×H×W` in [−1, 1] to folded NHWC.
    fn fold(&self, x: &Tensor) -> Result<Tensor> {
        Ok(space_to_depth(x, self.config.fold)?.permute((0, 2, 3, 1))?.contiguous()?)
    }

    /// Shared encoder applied to one date.
    pub fn encode(&self, folded: &Tensor) -> Result<Tensor> {
        let mut h = candle_nn::ops::silu(&self.stem.forward(folded)?)?;
        for layer in &self.encoder {
            h = (layer.forward(&h)? + &h)?;
        }
        Ok(h)
    }

    /// Change logits `B×1×H×W` for image batches `B×3×H×W`.
    pub fn forward(&self, pre: &Tensor, post: &Tensor) -> Result<Tensor> {
        if pre.dims() != post.dims() {
            return Err(Error::Dimension(format!("{:?} vs {:?}", pre.dims(), post.dims())));
        }
        let (s0, s1) = (self.fold(pre)?, self.fold(post)?);
        let (f0, f1) = (self.encode(&s0)?, self.encode(&s1)?);
        let fused = Tensor::cat(&[&f0, &f1, &(&f0 - &f1)?.abs()?, &(&s0 - &s1)?.abs()?], 3)?;
        let logits = self.head.forward(&self.fuse.forward(&fused)?)?;
        depth_to_space(&logits.permute((0, 3, 1, 2))?, self.config.fold)
    }

    fn device(&self) -> Device {
        self.vars.values().next().map(|v| v.device().clone()).unwrap_or(Device::Cpu)
    }

    fn batch(&self, pairs: &[&ChangePair]) -> Result<(Tensor, Tensor, Tensor)> {
        let dev = self.device();
        let to = |f: &dyn Fn(&ChangePair) -> Result<Tensor>| -> Result<Tensor> {
            Ok(Tensor::cat(&pairs.iter().map(|p| f(p)).collect::<Result<Vec<_>>>()?, 0)?)
        };
        Ok((
            to(&|p| image_to_tensor(&p.pre, DType::F32, &dev))?,
            to(&|p| image_to_tensor(&p.post, DType::F32, &dev))?,
            to(&|p| mask_to_tensor(&p.change, DType::F32, &dev))?,
        ))
    }

    /// Mean pixel-wise BCE over the given pairs.
    pub fn loss(&self, pairs: &[&ChangePair]) -> Result<Tensor> {
        let (pre, post, target) = self.batch(pairs)?;
        bce_with_logits(&self.forward(&pre, &post)?, &target)
    }

    /// Binary predictions (logit > 0).
    pub fn predict(&self, pairs: &[ChangePair]) -> Result<Vec<ChangeMask>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(16) {
            let refs: Vec<&ChangePair> = chunk.iter().collect();
            let (pre, post, _) = self.batch(&refs)?;
            let logits = self.forward(&pre, &post)?;
            let (b, _, h, w) = logits.dims4()?;
            let flat: Vec<f32> = logits.flatten_all()?.to_vec1()?;
            for j in 0..b {
                let cells = &flat[j * h * w..(j + 1) * h * w];
                out.push(ChangeMask::new(BinaryGrid::from_fn(h, w, |y, x| cells[y * w + x] > 0.0)));
            }
        }
        Ok(out)
    }

    /// Micro-averaged counts over all pairs.
    pub fn counts(&self, pairs: &[ChangePair]) -> Result<ChangeCounts> {
        let preds = self.predict(pairs)?;
        let mut acc = ChangeCounts::default();
        for (pred, pair) in preds.iter().zip(pairs) {
            acc = acc.merge(ChangeCounts::from_masks(pred.grid(), pair.change.grid())?);
        }
        Ok(acc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = DetectorMeta {
            config: self.config.clone(),
            step: self.step,
            dataset_name: self.dataset_name.clone(),
            train_scene_seeds: self.train_scene_seeds.clone(),
        };
        checkpoint::write(path, DETECTOR_HEADER, &meta, &self.vars)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let loaded = checkpoint::read::<DetectorMeta>(path, DETECTOR_HEADER)?;
        let mut det = Self::new(loaded.meta.config.clone(), 0, device)?;
        loaded.assign(&det.vars)?;
        det.step = loaded.meta.step;
        det.dataset_name = loaded.meta.dataset_name;
        det.train_scene_seeds = loaded.meta.train_scene_seeds;
        Ok(det)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DetectorMeta {
    config: DetectorConfig,
    step: u64,
    dataset_name: Option<String>,
    train_scene_seeds: BTreeSet<u64>,
}

/// Numerically stable mean binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    // max(x, 0) − x·t + log(1 + e^{−|x|})
    let relu = logits.relu()?;
    let soft = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(((relu - (logits * target)?)? + soft)?.mean_all()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Loss of the first batch before any update, then every `log_every` steps.
    pub losses: Vec<LossPoint>,
    pub pairs: usize,
}

/// Draws the training batch of `step`; the same D4 transform is applied to
/// both images and the label of each example.
pub fn training_batch(pairs: &[ChangePair], cfg: &DetectorConfig, step: u64) -> Vec<ChangePair> {
    let mut r = rng(derive_seed(derive_stream(cfg.seed, "detector-batch"), step));
    (0..cfg.batch_size)
        .map(|_| {
            let pair = &pairs[r.random_range(0..pairs.len())];
            let t = if cfg.d4 { D4::from_index(r.random_range(0..8)) } else { D4::IDENTITY };
            pair.transformed(t)
        })
        .collect()
}

/// Supervised pre-training on every pair of the given set.
pub fn pretrain(
    det: &mut SiameseDetector,
    pairs: &[ChangePair],
    mut on_log: impl FnMut(&LossPoint),
) -> Result<PretrainReport> {
    if pairs.is_empty() {
        return Err(Error::Validation("no training pairs".into()));
    }
    let cfg = det.config.clone();
    let mut opt = AdamW::new(
        det.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    det.train_scene_seeds.extend(pairs.iter().map(|p| p.scene_seed));
    let mut losses = Vec::new();
    let mut acc = (0.0, 0usize);
    for _ in 0..cfg.steps {
        let batch = training_batch(pairs, &cfg, det.step);
        let refs: Vec<&ChangePair> = batch.iter().collect();
        let loss = det.loss(&refs)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if det.step == 0 {
            let p = LossPoint { step: 0, loss: value };
            on_log(&p);
            losses.push(p);
        }
        opt.backward_step(&loss)?;
        det.step += 1;
        acc = (acc.0 + value, acc.1 + 1);
        if cfg.log_every > 0 && det.step.is_multiple_of(cfg.log_every as u64) {
            let p = LossPoint {
                step: det.step,
                loss: acc.0 / acc.1 as f64,
            };
            on_log(&p);
            losses.push(p);
            acc = (0.0, 0);
        }
    }
    Ok(PretrainReport {
        losses,
        pairs: pairs.len(),
    })
}

/// Pre-trains a fresh detector on a generated dataset directory.
pub fn pretrain_detector(
    root: &Path,
    cfg: &DetectorConfig,
    device: &Device,
    on_log: impl FnMut(&LossPoint),
) -> Result<(SiameseDetector, PretrainReport)> {
    let (manifest, pairs) = load_pairs(root)?;
    let mut det = SiameseDetector::new(cfg.clone(), derive_stream(cfg.seed, "detector-init"), device)?;
    det.dataset_name = Some(manifest.name);
    let report = pretrain(&mut det, &pairs, on_log)?;
    Ok((det, report))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub pairs: usize,
    pub metrics: BinaryChangeMetrics,
    pub baselines: RandomBaselines,
}

/// Evaluates without fine-tuning. Refuses sets sharing a scene seed with the
/// detector's training data unless `allow_overlap` is set.
pub fn zero_shot_eval(det: &SiameseDetector, root: &Path, allow_overlap: bool) -> Result<EvalReport> {
    let (manifest, pairs) = load_pairs(root)?;
    if !allow_overlap {
        let shared = manifest.scene_seeds().intersection(&det.train_scene_seeds).count();
        if shared > 0 {
            return Err(Error::Validation(format!(
                "{shared} scene seeds of {} also appear in the training data",
                manifest.name
            )));
        }
    }
    let counts = det.counts(&pairs)?;
    Ok(EvalReport {
        dataset: manifest.name,
        pairs: pairs.len(),
        metrics: counts.metrics(),
        baselines: RandomBaselines::from_counts(&counts),
    })
}
