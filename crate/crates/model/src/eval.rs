//! Experiments over generated data: coherence of unchanged regions,
//! λ sweeps with downstream detector scores, and their report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Device;
use changen_core::dataset::read_sample;
use changen_core::rng::derive_stream;
use changen_core::{ChangeMask, RgbImage};
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_dataset, GenerateConfig};
use crate::detector::{load_pairs, pretrain, DetectorConfig, SiameseDetector};
use crate::error::{Error, Result};
use crate::sampler::{synthesize_series_batch, ChangeSynthesizer, SeriesStart};

/// Mean absolute difference (in [0, 1] intensity units) over pixels the
/// change mask marks unchanged; `None` when every pixel changed.
pub fn unchanged_mae(pre: &RgbImage, post: &RgbImage, change: &ChangeMask) -> Result<Option<f64>> {
    if pre.shape() != post.shape() || pre.shape() != change.shape() {
        return Err(Error::Dimension("coherence rasters differ in size".into()));
    }
    let (h, w) = pre.shape();
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if change.get(y, x) {
                continue;
            }
            let (a, b) = (pre.pixel(y, x), post.pixel(y, x));
            sum += (0..3).map(|c| (f64::from(a[c]) - f64::from(b[c])).abs()).sum::<f64>();
            n += 3;
        }
    }
    Ok((n > 0).then(|| sum / n as f64 / 255.0))
}

/// Per-start unchanged-region MAE of one synthesized step at guidance `lambda`;
/// noise seeds come from each start, so calls at different λ are paired.
pub fn coherence_trial(synth: &dyn ChangeSynthesizer, starts: &[SeriesStart], lambda: f64) -> Result<Vec<Option<f64>>> {
    let starts: Vec<SeriesStart> = starts
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.guidance.lambda = lambda;
            s.events.truncate(1);
            s
        })
        .collect();
    let samples = synthesize_series_batch(synth, &starts)?;
    samples
        .iter()
        .map(|s| unchanged_mae(&s.images[0], &s.images[1], &s.change_masks[0]))
        .collect()
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `trials` fair coin flips.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    let mut p = 0.0;
    let mut coef = 1.0f64; // C(trials, k), built incrementally
    for k in 0..=trials {
        if k > 0 {
            coef = coef * (trials - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += coef;
        }
    }
    p / 2f64.powi(trials as i32)
}

/// Mean unchanged-region MAE over the pairs of a stored dataset.
pub fn dataset_coherence(root: &Path) -> Result<f64> {
    let manifest = changen_core::dataset::DatasetManifest::load(root)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for record in &manifest.records {
        let s = read_sample(&manifest.sample_dir(root, record))?;
        for (k, c) in s.change_masks.iter().enumerate() {
            if let Some(v) = unchanged_mae(&s.images[k], &s.images[k + 1], c)? {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Validation("no unchanged pixels to score".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub coherence_mae: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    /// Template for every λ; only `guidance.lambda` changes between runs.
    pub generate: GenerateConfig,
    pub detector: DetectorConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Whether downstream F1 is non-increasing in λ; reported, never enforced.
    pub smaller_lambda_better: bool,
    pub csv: PathBuf,
    pub plot: PathBuf,
}

/// For each λ: generate a dataset, score its coherence, pre-train a detector
/// on it with a fixed budget and evaluate on `heldout`. Writes
/// `sweep.csv` and `sweep.svg` into `out_dir`.
pub fn lambda_sweep(
    cfg: &SweepConfig,
    synth: &dyn ChangeSynthesizer,
    heldout: &Path,
    out_dir: &Path,
    device: &Device,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<SweepReport> {
    if cfg.lambdas.is_empty() {
        return Err(Error::Parameter("no λ values".into()));
    }
    let (_, eval_pairs) = load_pairs(heldout)?;
    let mut rows = Vec::new();
    for &lambda in &cfg.lambdas {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Parameter(format!("lambda {lambda} outside [0, 1]")));
        }
        let mut gen = cfg.generate.clone();
        gen.guidance.lambda = lambda;
        let dir = out_dir.join(format!("lambda-{lambda}"));
        let (_, root) = generate_dataset(&gen, synth, "rsdit", &dir, None)?;
        let coherence_mae = dataset_coherence(&root)?;
        let (manifest, pairs) = load_pairs(&root)?;
        let mut det = SiameseDetector::new(cfg.detector.clone(), derive_stream(cfg.detector.seed, "detector-init"), device)?;
        det.dataset_name = Some(manifest.name);
        let report = pretrain(&mut det, &pairs, |_| {})?;
        let m = det.counts(&eval_pairs)?.metrics();
        let row = SweepRow {
            lambda,
            coherence_mae,
            f1: m.f1,
            precision: m.precision,
            recall: m.recall,
            iou: m.iou,
            final_loss: report.losses.last().map(|p| p.loss).unwrap_or(f64::NAN),
        };
        on_row(&row);
        rows.push(row);
    }
    let mut by_lambda = rows.clone();
    by_lambda.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let smaller_lambda_better = by_lambda.windows(2).all(|w| w[0].f1 >= w[1].f1);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("sweep.csv");
    write_csv(&csv, &rows)?;
    let plot = out_dir.join("sweep.svg");
    let coherence: Vec<(f64, f64)> = by_lambda.iter().map(|r| (r.lambda, r.coherence_mae)).collect();
    let f1: Vec<(f64, f64)> = by_lambda.iter().map(|r| (r.lambda, r.f1)).collect();
    let svg = line_plot_svg("λ sweep", "λ", &[("unchanged MAE", &coherence), ("held-out F1", &f1)]);
    std::fs::write(&plot, svg).map_err(|e| Error::io(&plot, e))?;
    Ok(SweepReport {
        rows,
        smaller_lambda_better,
        csv,
        plot,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Minimal multi-series line chart; each series is scaled to its own range
/// so curves of different units share one canvas.
pub fn line_plot_svg(title: &str, x_label: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).filter(|v| v.is_finite());
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = |a: f64, b: f64| if (b - a).abs() < 1e-12 { 1.0 } else { b - a };
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(svg, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M);
    let _ = writeln!(svg, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(svg, r#"<text x="{M}" y="{}" text-anchor="middle">{x0:.3}</text>"#, H - M + 16.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.3}</text>"#, W - M, H - M + 16.0);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let finite: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        let (y0, y1) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let map = |p: (f64, f64)| {
            (
                M + (p.0 - x0) / span(x0, x1) * (W - 2.0 * M),
                H - M - (p.1 - y0) / span(y0, y1) * (H - 2.0 * M),
            )
        };
        let path: Vec<String> = finite.iter().map(|&p| {
            let (x, y) = map(p);
            format!("{x:.1},{y:.1}")
        }).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &p in &finite {
            let (x, y) = map(p);
            let _ = writeln!(svg, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{} [{y0:.4}, {y1:.4}]</text>"#,
            M + 10.0,
            M + 16.0 * i as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_matches_hand_values() {
        assert!((sign_test_p(0, 4) - 1.0).abs() < 1e-12);
        assert!((sign_test_p(4, 4) - 1.0 / 16.0).abs() < 1e-12);
        assert!((sign_test_p(3, 4) - 5.0 / 16.0).abs() < 1e-12);
        assert!(sign_test_p(13, 16) < 0.05);
        assert!(sign_test_p(12, 16) > 0.03);
    }

    #[test]
    fn mae_ignores_changed_pixels() {
        let a = RgbImage::filled(2, 2, [0, 0, 0]);
        let mut b = a.clone();
        b.set_pixel(0, 0, [255, 255, 255]);
        let mut g = changen_core::BinaryGrid::zeros(2, 2);
        g.set(0, 0, true);
        assert_eq!(unchanged_mae(&a, &b, &ChangeMask::new(g)).unwrap(), Some(0.0));
        let all = ChangeMask::new(changen_core::BinaryGrid::from_fn(2, 2, |_, _| true));
        assert_eq!(unchanged_mae(&a, &b, &all).unwrap(), None);
        let none = ChangeMask::zeros(2, 2);
        assert!((unchanged_mae(&a, &b, &none).unwrap().unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn plot_has_one_polyline_per_series() {
        let a = [(0.0, 1.0), (1.0, 2.0)];
        let svg = line_plot_svg("t", "x", &[("a", &a), ("b", &a)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
