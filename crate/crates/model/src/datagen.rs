//! Dataset assembly: procedural scenes, simulated events and synthesized
//! post-event images written in chunks by parallel workers.
//!
//! Every sample is a pure function of `(root_seed, index)` and its chunk, so
//! output bytes do not depend on the worker count or on resumption.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use changen_core::dataset::{
    read_sample, sample_id, write_sample, ConditionKind, DatasetManifest, SampleRecord, SCHEMA_VERSION,
};
use changen_core::procedural::{gen_procedural_scene, SceneSpec};
use changen_core::rng::{derive_seed, derive_stream, rng};
use changen_core::{extract_contours, name_dataset, Condition, EventKind, EventSpec};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{synthesize_series_batch, ChangeSynthesizer, GuidanceConfig, SeriesStart};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub count: usize,
    pub scene: SceneSpec,
    /// Each step draws one template from this pool; its seed is re-derived per sample.
    pub events: Vec<EventSpec>,
    pub series_length: usize,
    /// `seed` is ignored; noise seeds derive from the sample seed.
    pub guidance: GuidanceConfig,
    pub condition: ConditionKind,
    pub root_seed: u64,
    /// Samples per synthesis batch; part of the output's identity.
    pub chunk_size: usize,
    #[serde(skip)]
    pub workers: usize,
}

impl GenerateConfig {
    pub fn new(count: usize, scene: SceneSpec, events: Vec<EventSpec>, guidance: GuidanceConfig, root_seed: u64) -> Self {
        Self {
            count,
            scene,
            events,
            series_length: 1,
            guidance,
            condition: ConditionKind::Semantic,
            root_seed,
            chunk_size: 8,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.guidance.validate()?;
        if self.count == 0 || self.series_length == 0 || self.chunk_size == 0 || self.workers == 0 {
            return Err(Error::Parameter("count, series_length, chunk_size and workers must be positive".into()));
        }
        if self.events.is_empty() {
            return Err(Error::Parameter("empty event pool".into()));
        }
        for e in &self.events {
            e.validate()?;
            let contour_event = e.kind == EventKind::ContourRemove;
            if contour_event != (self.condition == ConditionKind::Contour) {
                return Err(Error::Parameter(format!(
                    "{} events do not apply to {:?} conditions",
                    e.kind.as_str(),
                    self.condition
                )));
            }
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        match self.condition {
            ConditionKind::Semantic => usize::from(self.scene.num_classes) - 1,
            ConditionKind::Contour => 0,
        }
    }

    pub fn dataset_name(&self) -> String {
        name_dataset(self.class_count(), self.count)
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        derive_seed(self.root_seed, index as u64)
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        derive_stream(self.sample_seed(index), "scene")
    }

    /// Starting state and event plan of sample `index`.
    pub fn series_start(&self, index: usize) -> Result<SeriesStart> {
        let sample_seed = self.sample_seed(index);
        let scene_seed = self.scene_seed(index);
        let scene = gen_procedural_scene(&self.scene, scene_seed)?;
        let condition = match self.condition {
            ConditionKind::Semantic => Condition::Semantic(scene.mask),
            ConditionKind::Contour => Condition::Contour(extract_contours(&scene.instances)),
        };
        let mut pick = rng(derive_stream(sample_seed, "event-pick"));
        let event_root = derive_stream(sample_seed, "event");
        let events = (0..self.series_length)
            .map(|k| self.events[pick.random_range(0..self.events.len())].with_seed(derive_seed(event_root, k as u64)))
            .collect();
        Ok(SeriesStart {
            image: scene.image,
            condition,
            instances: scene.instances,
            events,
            guidance: self.guidance.with_seed(derive_stream(sample_seed, "noise")),
            sample_seed,
            scene_seed,
        })
    }

    fn generator_json(&self, synthesizer: &str) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        v["synthesizer"] = serde_json::Value::String(synthesizer.to_string());
        Ok(v)
    }
}

fn existing_record(dir: &Path, cfg: &GenerateConfig, index: usize) -> Option<SampleRecord> {
    let sample = read_sample(dir).ok()?;
    sample.validate_labels().ok()?;
    let p = &sample.provenance;
    let matches = p.sample_seed == cfg.sample_seed(index)
        && p.scene_seed == cfg.scene_seed(index)
        && sample.len() == cfg.series_length
        && p.guidance_lambda == cfg.guidance.lambda
        && p.sampling_steps == cfg.guidance.steps;
    matches.then(|| record(index, p.sample_seed, p.scene_seed, p.event_kinds.clone()))
}

fn record(index: usize, sample_seed: u64, scene_seed: u64, event_kinds: Vec<EventKind>) -> SampleRecord {
    let id = sample_id(index);
    SampleRecord {
        dir: format!("samples/{id}"),
        id,
        sample_seed,
        scene_seed,
        event_kinds,
    }
}

fn generate_chunk(
    cfg: &GenerateConfig,
    synth: &dyn ChangeSynthesizer,
    root: &Path,
    indices: std::ops::Range<usize>,
) -> Result<Vec<SampleRecord>> {
    let existing: Vec<Option<SampleRecord>> = indices
        .clone()
        .map(|i| existing_record(&root.join("samples").join(sample_id(i)), cfg, i))
        .collect();
    if existing.iter().all(Option::is_some) {
        return Ok(existing.into_iter().flatten().collect());
    }
    // a chunk is regenerated whole so its batch composition never changes
    let starts = indices.clone().map(|i| cfg.series_start(i)).collect::<Result<Vec<_>>>()?;
    let samples = synthesize_series_batch(synth, &starts)?;
    let partial = root.join(".partial");
    let mut out = Vec::with_capacity(samples.len());
    for (i, sample) in indices.zip(samples) {
        let id = sample_id(i);
        let tmp = partial.join(&id);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        write_sample(&tmp, &id, &sample)?;
        let dest = root.join("samples").join(&id);
        if dest.exists() {
            fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
        }
        fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
        let p = sample.provenance;
        out.push(record(i, p.sample_seed, p.scene_seed, p.event_kinds));
    }
    Ok(out)
}

/// Progress callback: (samples done, total).
pub type Progress<'a> = &'a (dyn Fn(usize, usize) + Sync);

/// Writes `<out_dir>/<name>/{manifest.json, samples/...}` and returns the
/// manifest and dataset root. Valid samples already on disk are kept.
pub fn generate_dataset(
    cfg: &GenerateConfig,
    synth: &dyn ChangeSynthesizer,
    synthesizer_name: &str,
    out_dir: &Path,
    progress: Option<Progress>,
) -> Result<(DatasetManifest, PathBuf)> {
    cfg.validate()?;
    let root = out_dir.join(cfg.dataset_name());
    let samples_dir = root.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let chunks: Vec<std::ops::Range<usize>> = (0..cfg.count)
        .step_by(cfg.chunk_size)
        .map(|s| s..(s + cfg.chunk_size).min(cfg.count))
        .collect();
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<SampleRecord>>>>> = Mutex::new((0..chunks.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(chunks.len()) {
            scope.spawn(|| loop {
                let c = next.fetch_add(1, Ordering::SeqCst);
                let Some(range) = chunks.get(c) else { break };
                let result = generate_chunk(cfg, synth, &root, range.clone());
                let failed = result.is_err();
                let n = done.fetch_add(range.len(), Ordering::SeqCst) + range.len();
                results.lock().expect("result lock")[c] = Some(result);
                if failed {
                    // stop handing out work
                    next.store(chunks.len(), Ordering::SeqCst);
                    break;
                }
                if let Some(p) = progress {
                    p(n, cfg.count);
                }
            });
        }
    });
    let results = results.into_inner().expect("result lock");
    let mut records = Vec::with_capacity(cfg.count);
    let mut missing = false;
    for r in results {
        match r {
            Some(r) => records.extend(r?),
            None => missing = true,
        }
    }
    if missing {
        return Err(Error::Validation("generation stopped before every chunk ran".into()));
    }
    let partial = root.join(".partial");
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        name: cfg.dataset_name(),
        pair_count: cfg.count,
        class_count: cfg.class_count(),
        guidance_lambda: cfg.guidance.lambda,
        condition: cfg.condition,
        root_seed: cfg.root_seed,
        generator: cfg.generator_json(synthesizer_name)?,
        records,
    };
    manifest.validate()?;
    manifest.save(&root)?;
    Ok((manifest, root))
}
