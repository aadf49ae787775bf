//! On-disk layout of generated change datasets.
//!
//! ```text
//! <name>/manifest.json
//! <name>/samples/<id>/t0.png t1.png mask_t0.png mask_t1.png change.png meta.json
//! ```
//!
//! Longer series add `t<k>.png`, `mask_t<k>.png` and `change_t<k>.png` for
//! `k ≥ 2`. Images are 8-bit RGB PNG, labels 8-bit single-channel PNG, and
//! every file's SHA-256 is recorded in `meta.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::events::{Condition, EventKind, LogEntry};
use crate::grid::{BinaryGrid, Grid};
use crate::image::RgbImage;
use crate::naming::parse_dataset_name;
use crate::scene::{change_mask_of, dilate, ChangeMask, ContourMap, InstanceMap, SemanticMask};

pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------- PNG codecs

fn png_error(e: impl std::fmt::Display) -> Error {
    Error::Validation(format!("png: {e}"))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(png_error)?;
        writer.write_image_data(data).map_err(png_error)?;
    }
    Ok(out)
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(bytes: &[u8]) -> Result<Decoded> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(png_error)?;
    let size = reader.output_buffer_size().ok_or_else(|| png_error("image too large"))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(png_error)?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

pub fn encode_gray8(grid: &Grid<u8>) -> Result<Vec<u8>> {
    encode_png(grid.width(), grid.height(), png::ColorType::Grayscale, png::BitDepth::Eight, grid.as_slice())
}

pub fn decode_gray8(bytes: &[u8]) -> Result<Grid<u8>> {
    let d = decode_png(bytes)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::Eight {
        return Err(png_error("expected 8-bit grayscale"));
    }
    Grid::from_vec(d.height, d.width, d.data)
}

pub fn encode_gray16(grid: &Grid<u16>) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = grid.as_slice().iter().flat_map(|v| v.to_be_bytes()).collect();
    encode_png(grid.width(), grid.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn decode_gray16(bytes: &[u8]) -> Result<Grid<u16>> {
    let d = decode_png(bytes)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::Sixteen {
        return Err(png_error("expected 16-bit grayscale"));
    }
    let values = d.data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Grid::from_vec(d.height, d.width, values)
}

pub fn encode_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    encode_png(img.width(), img.height(), png::ColorType::Rgb, png::BitDepth::Eight, img.as_bytes())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let d = decode_png(bytes)?;
    if d.color != png::ColorType::Rgb || d.depth != png::BitDepth::Eight {
        return Err(png_error("expected 8-bit RGB"));
    }
    RgbImage::new(d.height, d.width, d.data)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Instance map as a 16-bit PNG plus a `<stem>.json` sidecar of id → class.
pub fn write_instance_map(png_path: &Path, instances: &InstanceMap) -> Result<()> {
    let ids = instances.grid();
    if let Some(&big) = ids.as_slice().iter().find(|&&v| v > u32::from(u16::MAX)) {
        return Err(Error::Parameter(format!("instance id {big} does not fit 16 bits")));
    }
    write_file(png_path, &encode_gray16(&ids.map(|v| v as u16))?)?;
    let sidecar: BTreeMap<String, u8> = instances.classes().iter().map(|(k, v)| (k.to_string(), *v)).collect();
    write_file(&png_path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())
}

pub fn read_instance_map(png_path: &Path) -> Result<InstanceMap> {
    let ids = decode_gray16(&read_file(png_path)?)?.map(u32::from);
    let sidecar_path = png_path.with_extension("json");
    let sidecar: BTreeMap<String, u8> = serde_json::from_slice(&read_file(&sidecar_path)?)?;
    let classes = sidecar
        .into_iter()
        .map(|(k, v)| {
            k.parse::<u32>()
                .map(|id| (id, v))
                .map_err(|_| Error::Config(format!("bad instance id {k:?} in {}", sidecar_path.display())))
        })
        .collect::<Result<_>>()?;
    InstanceMap::new(ids, classes)
}

pub fn write_semantic_mask(path: &Path, mask: &SemanticMask) -> Result<()> {
    write_file(path, &encode_gray8(mask.grid())?)
}

pub fn read_semantic_mask(path: &Path, num_classes: u16, background: u8) -> Result<SemanticMask> {
    SemanticMask::new(decode_gray8(&read_file(path)?)?, num_classes, background)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_file(path, &encode_rgb(img)?)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    decode_rgb(&read_file(path)?)
}

// ----------------------------------------------------------------- samples

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Semantic,
    Contour,
}

/// Seeds and event logs needed to explain (and replay) a sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_seed: u64,
    pub scene_seed: u64,
    pub event_seeds: Vec<u64>,
    pub event_kinds: Vec<EventKind>,
    pub noise_seeds: Vec<u64>,
    pub logs: Vec<Vec<LogEntry>>,
    pub guidance_lambda: f64,
    pub sampling_steps: usize,
    /// Erase radius used by contour events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation_radius: Option<usize>,
}

/// Ordered images, conditions and per-step change masks of one synthesized
/// series.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSample {
    pub images: Vec<RgbImage>,
    pub conditions: Vec<Condition>,
    pub change_masks: Vec<ChangeMask>,
    pub cumulative_change: ChangeMask,
    pub provenance: Provenance,
}

impl TimeSeriesSample {
    pub fn new(
        images: Vec<RgbImage>,
        conditions: Vec<Condition>,
        change_masks: Vec<ChangeMask>,
        provenance: Provenance,
    ) -> Result<Self> {
        if images.len() < 2 || images.len() != conditions.len() || change_masks.len() + 1 != images.len() {
            return Err(Error::Validation(format!(
                "{} images, {} conditions, {} change masks",
                images.len(),
                conditions.len(),
                change_masks.len()
            )));
        }
        let shape = images[0].shape();
        if images.iter().any(|i| i.shape() != shape)
            || conditions.iter().any(|c| c.shape() != shape)
            || change_masks.iter().any(|c| c.shape() != shape)
        {
            return Err(Error::Dimension("series rasters differ in size".into()));
        }
        let cumulative_change = match (&conditions[0], conditions.last()) {
            (Condition::Semantic(a), Some(Condition::Semantic(b))) => change_mask_of(a, b)?,
            _ => {
                let mut acc = ChangeMask::zeros(shape.0, shape.1);
                for c in &change_masks {
                    acc = acc.union(c)?;
                }
                acc
            }
        };
        Ok(Self {
            images,
            conditions,
            change_masks,
            cumulative_change,
            provenance,
        })
    }

    /// Number of bitemporal steps.
    pub fn len(&self) -> usize {
        self.change_masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.change_masks.is_empty()
    }

    pub fn condition_kind(&self) -> ConditionKind {
        match self.conditions[0] {
            Condition::Semantic(_) => ConditionKind::Semantic,
            Condition::Contour(_) => ConditionKind::Contour,
        }
    }

    /// Checks that stored change masks are consistent with stored conditions.
    pub fn validate_labels(&self) -> Result<()> {
        for (k, change) in self.change_masks.iter().enumerate() {
            match (&self.conditions[k], &self.conditions[k + 1]) {
                (Condition::Semantic(a), Condition::Semantic(b)) => {
                    if &change_mask_of(a, b)? != change {
                        return Err(Error::Validation(format!("change mask {k} disagrees with its conditions")));
                    }
                }
                (Condition::Contour(a), Condition::Contour(b)) => {
                    if b.and_not(a)?.any() {
                        return Err(Error::Validation(format!("contour {} gained pixels", k + 1)));
                    }
                    let radius = self.provenance.dilation_radius.unwrap_or(1);
                    let erase = dilate(change.grid(), radius);
                    if b.zip_map(&erase, |p, e| p && e)?.any() {
                        return Err(Error::Validation(format!("contour {} overlaps its dilated change", k + 1)));
                    }
                }
                _ => return Err(Error::Validation("mixed condition kinds".into())),
            }
        }
        Ok(())
    }
}

fn image_name(k: usize) -> String {
    format!("t{k}.png")
}

fn mask_name(k: usize) -> String {
    format!("mask_t{k}.png")
}

fn change_name(k: usize) -> String {
    if k == 1 {
        "change.png".into()
    } else {
        format!("change_t{k}.png")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub schema_version: u32,
    pub id: String,
    pub condition: ConditionKind,
    pub num_classes: u16,
    pub background: u8,
    pub steps: usize,
    /// File name → SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
    pub provenance: Provenance,
}

fn encode_condition(c: &Condition) -> Result<Vec<u8>> {
    match c {
        Condition::Semantic(m) => encode_gray8(m.grid()),
        Condition::Contour(c) => encode_gray8(&c.to_u8()),
    }
}

/// Writes one sample directory; returns its metadata.
pub fn write_sample(dir: &Path, id: &str, sample: &TimeSeriesSample) -> Result<SampleMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        files.insert(name.clone(), sha256_hex(&bytes));
        write_file(&dir.join(name), &bytes)
    };
    for (k, img) in sample.images.iter().enumerate() {
        put(image_name(k), encode_rgb(img)?)?;
    }
    for (k, c) in sample.conditions.iter().enumerate() {
        put(mask_name(k), encode_condition(c)?)?;
    }
    for (k, c) in sample.change_masks.iter().enumerate() {
        put(change_name(k + 1), encode_gray8(&c.to_u8())?)?;
    }
    let (num_classes, background) = match &sample.conditions[0] {
        Condition::Semantic(m) => (m.num_classes(), m.background()),
        Condition::Contour(_) => (2, 0),
    };
    let meta = SampleMeta {
        schema_version: SCHEMA_VERSION,
        id: id.to_string(),
        condition: sample.condition_kind(),
        num_classes,
        background,
        steps: sample.len(),
        files,
        provenance: sample.provenance.clone(),
    };
    write_file(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(meta)
}

pub fn read_sample_meta(dir: &Path) -> Result<SampleMeta> {
    let meta: SampleMeta = serde_json::from_slice(&read_file(&dir.join("meta.json"))?)?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            expected: SCHEMA_VERSION,
            found: meta.schema_version,
        });
    }
    Ok(meta)
}

fn read_checked(dir: &Path, meta: &SampleMeta, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let expected = meta.files.get(name).ok_or_else(|| Error::Checksum {
        path: path.clone(),
        reason: "file missing from meta.json".into(),
    })?;
    let bytes = read_file(&path)?;
    let actual = sha256_hex(&bytes);
    if &actual != expected {
        return Err(Error::Checksum {
            path,
            reason: format!("sha256 {actual} != {expected}"),
        });
    }
    Ok(bytes)
}

/// Reads a sample, verifying every file against its recorded digest.
pub fn read_sample(dir: &Path) -> Result<TimeSeriesSample> {
    let meta = read_sample_meta(dir)?;
    let decode_err = |name: &str, e: Error| Error::Checksum {
        path: dir.join(name),
        reason: e.to_string(),
    };
    let mut images = Vec::with_capacity(meta.steps + 1);
    let mut conditions = Vec::with_capacity(meta.steps + 1);
    let mut changes = Vec::with_capacity(meta.steps);
    for k in 0..=meta.steps {
        let name = image_name(k);
        images.push(decode_rgb(&read_checked(dir, &meta, &name)?).map_err(|e| decode_err(&name, e))?);
        let name = mask_name(k);
        let grid = decode_gray8(&read_checked(dir, &meta, &name)?).map_err(|e| decode_err(&name, e))?;
        conditions.push(match meta.condition {
            ConditionKind::Semantic => Condition::Semantic(SemanticMask::new(grid, meta.num_classes, meta.background)?),
            ConditionKind::Contour => Condition::Contour(ContourMap::new(BinaryGrid::from_u8(&grid)?)),
        });
        if k > 0 {
            let name = change_name(k);
            let grid = decode_gray8(&read_checked(dir, &meta, &name)?).map_err(|e| decode_err(&name, e))?;
            changes.push(ChangeMask::new(BinaryGrid::from_u8(&grid)?));
        }
    }
    TimeSeriesSample::new(images, conditions, changes, meta.provenance)
}

// ---------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Relative to the dataset root.
    pub dir: String,
    pub sample_seed: u64,
    pub scene_seed: u64,
    pub event_kinds: Vec<EventKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub name: String,
    pub pair_count: usize,
    pub class_count: usize,
    pub guidance_lambda: f64,
    pub condition: ConditionKind,
    pub root_seed: u64,
    /// Free-form generation settings (scene spec, event plan, sampler).
    #[serde(default)]
    pub generator: serde_json::Value,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        let (classes, pairs) = parse_dataset_name(&self.name)?;
        if classes != self.class_count || pairs != self.pair_count {
            return Err(Error::Validation(format!(
                "name {} disagrees with class_count={} pair_count={}",
                self.name, self.class_count, self.pair_count
            )));
        }
        if self.records.len() != self.pair_count {
            return Err(Error::Validation(format!(
                "{} records for pair_count {}",
                self.records.len(),
                self.pair_count
            )));
        }
        Ok(())
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("manifest.json");
        write_file(&path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest: Self = serde_json::from_slice(&read_file(&root.join("manifest.json"))?)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn sample_dir(&self, root: &Path, record: &SampleRecord) -> PathBuf {
        root.join(&record.dir)
    }

    pub fn scene_seeds(&self) -> std::collections::BTreeSet<u64> {
        self.records.iter().map(|r| r.scene_seed).collect()
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Sample directories present on disk (those holding a `meta.json`).
pub fn scan_sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let samples = root.join("samples");
    if !samples.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&samples).map_err(|e| Error::io(&samples, e))? {
        let entry = entry.map_err(|e| Error::io(&samples, e))?;
        if entry.path().join("meta.json").is_file() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub scanned: usize,
    pub errors: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Sweeps a dataset: manifest consistency, checksums, and label/condition agreement.
pub fn verify_dataset(root: &Path) -> Result<VerifyReport> {
    let manifest = DatasetManifest::load(root)?;
    let mut report = VerifyReport {
        scanned: scan_sample_dirs(root)?.len(),
        ..Default::default()
    };
    if report.scanned != manifest.records.len() {
        report.errors.push(format!(
            "{} sample directories on disk, {} records in manifest",
            report.scanned,
            manifest.records.len()
        ));
    }
    for record in &manifest.records {
        let dir = manifest.sample_dir(root, record);
        let result = read_sample(&dir).and_then(|s| {
            s.validate_labels()?;
            if s.provenance.scene_seed != record.scene_seed {
                return Err(Error::Validation("scene seed differs from manifest".into()));
            }
            Ok(())
        });
        if let Err(e) = result {
            report.errors.push(format!("{}: {e}", record.id));
        }
        report.checked += 1;
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub samples: usize,
    pub steps: usize,
    pub pixels: u64,
    pub changed_pixels: u64,
    pub change_prevalence: f64,
    pub event_kinds: BTreeMap<String, usize>,
    /// Pixel histogram of classes over all first-frame semantic masks.
    pub class_histogram: BTreeMap<u8, u64>,
}

pub fn dataset_stats(root: &Path) -> Result<DatasetStats> {
    let manifest = DatasetManifest::load(root)?;
    let mut stats = DatasetStats {
        name: manifest.name.clone(),
        ..Default::default()
    };
    for record in &manifest.records {
        let sample = read_sample(&manifest.sample_dir(root, record))?;
        stats.samples += 1;
        stats.steps += sample.len();
        for c in &sample.change_masks {
            stats.pixels += (c.height() * c.width()) as u64;
            stats.changed_pixels += c.popcount() as u64;
        }
        for kind in &record.event_kinds {
            *stats.event_kinds.entry(kind.as_str().to_string()).or_default() += 1;
        }
        if let Condition::Semantic(m) = &sample.conditions[0] {
            for &v in m.grid().as_slice() {
                *stats.class_histogram.entry(v).or_default() += 1;
            }
        }
    }
    stats.change_prevalence = if stats.pixels == 0 {
        0.0
    } else {
        stats.changed_pixels as f64 / stats.pixels as f64
    };
    Ok(stats)
}
