//! `changen`: train the synthesizer, generate change datasets, check them,
//! and pre-train and score a change detector on them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use changen_core::dataset::{dataset_stats, verify_dataset, ConditionKind};
use changen_core::procedural::{SceneSpec, ShapeFamily};
use changen_core::{EventKind, EventSpec, TransitionMatrix};
use changen_model::condition::ConditionEncoding;
use changen_model::datagen::{generate_dataset, GenerateConfig};
use changen_model::detector::{pretrain_detector, zero_shot_eval, DetectorConfig, SiameseDetector};
use changen_model::eval::{lambda_sweep, line_plot_svg, write_csv, SweepConfig};
use changen_model::model::{ChangeModel, ModelSpec};
use changen_model::sampler::{ChangeSynthesizer, GuidanceConfig, ProceduralRenderer, Sampler};
use changen_model::train::{train, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "changen", version, about = "Synthetic change-detection data from a masked change diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser on procedural scenes and write a checkpoint.
    Train(TrainArgs),
    /// Generate a dataset of simulated events and synthesized post-event images.
    Generate(GenerateArgs),
    /// Check a dataset's manifest, checksums and label consistency.
    Verify { dataset: PathBuf },
    /// Print dataset statistics as JSON.
    Stats { dataset: PathBuf },
    /// Pre-train the Siamese change detector on a dataset.
    Pretrain(PretrainArgs),
    /// Score a detector on a held-out dataset without fine-tuning.
    Eval(EvalArgs),
    /// Generate, pre-train and evaluate once per guidance ratio.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Shapes {
    Rectangles,
    Blobs,
    Mixed,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ConditionArg {
    Semantic,
    Contour,
}

#[derive(Args)]
struct SceneArgs {
    /// Scene spec JSON; overrides the flags below.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Square image side in pixels (a multiple of 8).
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Semantic classes including background.
    #[arg(long, default_value_t = 4)]
    classes: u16,
    #[arg(long, value_enum, default_value_t = Shapes::Mixed)]
    shapes: Shapes,
}

impl SceneArgs {
    fn spec(&self) -> Result<SceneSpec> {
        let spec = match &self.scene {
            Some(path) => serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?,
            None => SceneSpec {
                height: self.size,
                width: self.size,
                num_classes: self.classes,
                shape_family: match self.shapes {
                    Shapes::Rectangles => ShapeFamily::Rectangles,
                    Shapes::Blobs => ShapeFamily::Blobs,
                    Shapes::Mixed => ShapeFamily::Mixed,
                },
                ..Default::default()
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    #[arg(long, value_enum, default_value_t = ConditionArg::Semantic)]
    condition: ConditionArg,
    /// Small denoiser for quick experiments.
    #[arg(long)]
    tiny: bool,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct GuidanceArgs {
    /// Fraction of sampling steps that mix in the pre-event image.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// DDIM sampling steps.
    #[arg(long = "sampling-steps", default_value_t = 50)]
    sampling_steps: usize,
}

#[derive(Args)]
struct GenerateArgs {
    /// Denoiser checkpoint; without one, post-event images are rendered procedurally.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Event pool as JSON (one spec or an array) or CSV.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Transition matrix (JSON or CSV) for edit events that lack one.
    #[arg(long)]
    transition: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    count: usize,
    /// Events per sample.
    #[arg(long = "series-length", default_value_t = 1)]
    series_length: usize,
    /// Parent directory; the dataset lands in `<out>/<name>`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long = "chunk-size", default_value_t = 8)]
    chunk_size: usize,
    /// Condition kind for procedural rendering; checkpoints fix their own.
    #[arg(long, value_enum, default_value_t = ConditionArg::Semantic)]
    condition: ConditionArg,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct DetectorArgs {
    #[arg(long = "detector-steps", default_value_t = 5000)]
    detector_steps: usize,
    #[arg(long = "detector-batch-size", default_value_t = 8)]
    detector_batch_size: usize,
    #[arg(long = "detector-lr", default_value_t = 1e-3)]
    detector_lr: f64,
    #[arg(long = "detector-width", default_value_t = 32)]
    detector_width: usize,
    #[arg(long = "detector-seed", default_value_t = 0)]
    detector_seed: u64,
    /// Disable random flips and rotations.
    #[arg(long = "no-augment")]
    no_augment: bool,
}

impl DetectorArgs {
    fn config(&self) -> DetectorConfig {
        DetectorConfig {
            width: self.detector_width,
            steps: self.detector_steps,
            batch_size: self.detector_batch_size,
            learning_rate: self.detector_lr,
            d4: !self.no_augment,
            seed: self.detector_seed,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory (the one holding manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Detector checkpoint to write; loss CSV and plot go next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON report path; printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score even if the held-out set shares scene seeds with training.
    #[arg(long = "allow-overlap")]
    allow_overlap: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Denoiser checkpoint; without one, images are rendered procedurally.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated guidance ratios.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
    lambdas: Vec<f64>,
    #[arg(long)]
    heldout: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    count: usize,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    transition: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long = "sampling-steps", default_value_t = 50)]
    sampling_steps: usize,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    scene: SceneArgs,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// `dir/stem.ext` beside `path`, e.g. `det.ckpt` → `det.losses.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn encoding(condition: ConditionArg, classes: u16) -> ConditionEncoding {
    match condition {
        ConditionArg::Semantic => ConditionEncoding::Semantic { num_classes: usize::from(classes) },
        ConditionArg::Contour => ConditionEncoding::Contour,
    }
}

fn condition_kind(enc: ConditionEncoding) -> ConditionKind {
    match enc {
        ConditionEncoding::Semantic { .. } => ConditionKind::Semantic,
        ConditionEncoding::Contour => ConditionKind::Contour,
    }
}

/// The event pool from a file, or a default pool for the condition kind.
fn event_pool(events: Option<&Path>, transition: Option<&Path>, kind: ConditionKind, classes: u16) -> Result<Vec<EventSpec>> {
    let matrix = match transition {
        Some(path) => TransitionMatrix::from_path(path)?,
        None => TransitionMatrix::uniform(usize::from(classes))?,
    };
    let mut pool = match (events, kind) {
        (Some(path), _) => EventSpec::list_from_path(path)?,
        (None, ConditionKind::Semantic) => vec![
            EventSpec::create(0.5, 0),
            EventSpec::remove(0.5, 0),
            EventSpec::edit(0.5, 0, matrix.clone()),
        ],
        (None, ConditionKind::Contour) => vec![EventSpec::contour_remove(0.5, 0, 1)],
    };
    for e in &mut pool {
        if e.kind == EventKind::Edit && e.transition.is_none() {
            e.transition = Some(matrix.clone());
        }
    }
    Ok(pool)
}

fn load_model(path: &Path) -> Result<ChangeModel> {
    ChangeModel::load(path, &Device::Cpu).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_scene_matches(model: &ChangeModel, scene: &SceneSpec) -> Result<()> {
    if let ConditionEncoding::Semantic { num_classes } = model.encoding() {
        if num_classes != usize::from(scene.num_classes) {
            bail!("checkpoint expects {num_classes} classes, scene has {}", scene.num_classes);
        }
    }
    Ok(())
}

fn progress(done: usize, total: usize) {
    eprintln!("  {done}/{total} samples");
}

fn run_train(a: TrainArgs) -> Result<()> {
    let scene = a.scene.spec()?;
    let mut model = match &a.init {
        Some(path) => load_model(path)?,
        None => {
            let enc = encoding(a.condition, scene.num_classes);
            let spec = if a.tiny { ModelSpec::tiny(enc) } else { ModelSpec::desk(enc) };
            ChangeModel::new(spec, a.seed, &Device::Cpu)?
        }
    };
    check_scene_matches(&model, &scene)?;
    eprintln!("{} parameters, starting at step {}", model.num_parameters(), model.step);
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
        scene,
        log_every: a.log_every,
        ..Default::default()
    };
    let report = train(&mut model, &cfg, |r| eprintln!("step {} mse {:.5} vb {:.5}", r.step, r.mse, r.vb))?;
    model.save(&a.out)?;
    write_csv(&sibling(&a.out, "losses.csv"), &report.records)?;
    let mse: Vec<(f64, f64)> = report.records.iter().map(|r| (r.step as f64, r.mse)).collect();
    let vb: Vec<(f64, f64)> = report.records.iter().map(|r| (r.step as f64, r.vb)).collect();
    let plot = sibling(&a.out, "losses.svg");
    std::fs::write(&plot, line_plot_svg("denoiser training", "step", &[("mse", &mse), ("vb", &vb)]))?;
    print_json(&serde_json::json!({
        "checkpoint": a.out,
        "steps": model.step,
        "eval_loss_before": report.eval_before,
        "eval_loss_after": report.eval_after,
    }))
}

fn run_generate(a: GenerateArgs) -> Result<()> {
    let scene = a.scene.spec()?;
    let model = a.checkpoint.as_deref().map(load_model).transpose()?;
    let kind = match &model {
        Some(m) => {
            check_scene_matches(m, &scene)?;
            condition_kind(m.encoding())
        }
        None => condition_kind(encoding(a.condition, scene.num_classes)),
    };
    let events = event_pool(a.events.as_deref(), a.transition.as_deref(), kind, scene.num_classes)?;
    let guidance = GuidanceConfig::new(a.guidance.lambda, a.guidance.sampling_steps, 0);
    let mut cfg = GenerateConfig::new(a.count, scene, events, guidance, a.seed);
    cfg.series_length = a.series_length;
    cfg.condition = kind;
    cfg.workers = a.workers;
    cfg.chunk_size = a.chunk_size;
    let sampler = model.as_ref().map(Sampler::from_model);
    let (synth, name): (&dyn ChangeSynthesizer, &str) = match &sampler {
        Some(s) => (s, "rsdit"),
        None => (&ProceduralRenderer, "procedural"),
    };
    let (manifest, root) = generate_dataset(&cfg, synth, name, &a.out, Some(&progress))?;
    print_json(&serde_json::json!({ "dataset": manifest.name, "path": root, "samples": manifest.records.len() }))
}

fn run_verify(dataset: &Path) -> Result<()> {
    let report = verify_dataset(dataset)?;
    print_json(&report)?;
    if !report.ok() {
        bail!("{} problems in {}", report.errors.len(), dataset.display());
    }
    Ok(())
}

fn run_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = a.detector.config();
    let log_every = cfg.log_every;
    let (det, report) = pretrain_detector(&a.data, &cfg, &Device::Cpu, |p| {
        if (p.step as usize).is_multiple_of((log_every * 10).max(1)) {
            eprintln!("step {} loss {:.5}", p.step, p.loss);
        }
    })?;
    det.save(&a.out)?;
    write_csv(&sibling(&a.out, "losses.csv"), &report.losses)?;
    let curve: Vec<(f64, f64)> = report.losses.iter().map(|p| (p.step as f64, p.loss)).collect();
    std::fs::write(sibling(&a.out, "losses.svg"), line_plot_svg("detector pre-training", "step", &[("bce", &curve)]))?;
    print_json(&serde_json::json!({
        "checkpoint": a.out,
        "pairs": report.pairs,
        "final_loss": report.losses.last().map(|p| p.loss),
    }))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let det = SiameseDetector::load(&a.detector, &Device::Cpu)?;
    let report = zero_shot_eval(&det, &a.data, a.allow_overlap)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let scene = a.scene.spec()?;
    let model = a.checkpoint.as_deref().map(load_model).transpose()?;
    let kind = match &model {
        Some(m) => {
            check_scene_matches(m, &scene)?;
            condition_kind(m.encoding())
        }
        None => ConditionKind::Semantic,
    };
    let events = event_pool(a.events.as_deref(), a.transition.as_deref(), kind, scene.num_classes)?;
    let mut generate = GenerateConfig::new(a.count, scene, events, GuidanceConfig::new(0.0, a.sampling_steps, 0), a.seed);
    generate.condition = kind;
    generate.workers = a.workers;
    let cfg = SweepConfig {
        lambdas: a.lambdas.clone(),
        generate,
        detector: a.detector.config(),
    };
    let sampler = model.as_ref().map(Sampler::from_model);
    let synth: &dyn ChangeSynthesizer = match &sampler {
        Some(s) => s,
        None => &ProceduralRenderer,
    };
    let report = lambda_sweep(&cfg, synth, &a.heldout, &a.out, &Device::Cpu, |row| {
        eprintln!("λ={} coherence {:.4} F1 {:.4}", row.lambda, row.coherence_mae, row.f1);
    })?;
    if !report.smaller_lambda_better {
        eprintln!("note: held-out F1 does not decrease monotonically in λ");
    }
    write_json(&a.out.join("sweep.json"), &report)?;
    print_json(&report)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => run_train(a),
        Command::Generate(a) => run_generate(a),
        Command::Verify { dataset } => run_verify(&dataset),
        Command::Stats { dataset } => print_json(&dataset_stats(&dataset)?),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
    }
}
