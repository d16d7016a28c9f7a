use std::path::Path;

use mitodiff::classifier::{ClassifierEnsemble, PatchScorer};
use mitodiff::diffusion::DiffusionModel;
use mitodiff::sweep::{curve_stats, generate_sweeps, montage, score_series, SweepSeries};
use serde::Serialize;

use super::{create_dir, io_err, require_file, write_json, Reporter, CURVE_CSV, MONTAGE, SWEEP_CSV, SWEEP_SUMMARY};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub series: usize,
    pub images: usize,
    pub accepted: usize,
    pub conditions: Vec<f32>,
    pub mean: Vec<f64>,
    pub spearman: f64,
    /// Mean score at the last condition minus the first.
    pub gap: f64,
}

pub(crate) fn load_models(dpm: &Path, clf: &Path) -> Result<(DiffusionModel, ClassifierEnsemble)> {
    require_file(dpm, "denoiser checkpoint")?;
    require_file(clf, "classifier checkpoint")?;
    let model = DiffusionModel::load(dpm)?;
    let ensemble = ClassifierEnsemble::load(clf)?;
    if ensemble.patch_side() != model.side {
        return Err(CliError::validation(format!(
            "classifier expects {} px patches, denoiser produces {} px",
            ensemble.patch_side(),
            model.side
        )));
    }
    Ok((model, ensemble))
}

/// Samples `sweep_seeds` series over the condition grid, scores every image,
/// flags series passing the selection rule and writes:
/// `sweep.csv`, `curve.csv`, `summary.json`, `images/` and, when any series
/// is accepted, `montage.png` of the accepted ones.
pub fn sweep(cfg: &RunConfig, dpm: &Path, clf: &Path, out: &Path, log: Reporter) -> Result<SweepReport> {
    let (model, ensemble) = load_models(dpm, clf)?;
    if cfg.sweep_seeds == 0 {
        return Err(CliError::validation("sweep_seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (0..cfg.sweep_seeds as u64).map(|i| cfg.sweep_first_seed + i).collect();
    let mut series: Vec<SweepSeries> = Vec::with_capacity(seeds.len());
    for (k, chunk) in seeds.chunks(10).enumerate() {
        let mut part = generate_sweeps(&model, &model.schedule, model.side, chunk, &cfg.sweep_grid, cfg.sweep_batch)?;
        for s in &mut part {
            score_series(s, &ensemble)?;
        }
        series.extend(part);
        log.say(format!("sampled {} / {} series", (k * 10 + chunk.len()).min(seeds.len()), seeds.len()));
    }
    let accepted = cfg.selection().apply(&mut series)?;
    let stats = curve_stats(&series)?;

    let images_dir = out.join("images");
    create_dir(&images_dir)?;
    let csv_path = out.join(SWEEP_CSV);
    let mut csv = csv::Writer::from_path(&csv_path)?;
    csv.write_record(["seed", "condition", "score", "accepted"])?;
    for s in &series {
        let scores = s.scores()?;
        for (i, (c, img)) in s.conditions.iter().zip(&s.images).enumerate() {
            csv.write_record([s.seed.to_string(), c.to_string(), scores[i].to_string(), s.accepted.to_string()])?;
            img.save_png(images_dir.join(format!("s{:06}_c{i:02}.png", s.seed)))?;
        }
    }
    csv.flush().map_err(|e| io_err(&csv_path, e))?;

    let curve_path = out.join(CURVE_CSV);
    let mut curve = csv::Writer::from_path(&curve_path)?;
    curve.write_record(["condition", "mean", "median", "standard_error", "n"])?;
    for i in 0..stats.conditions.len() {
        curve.write_record([
            stats.conditions[i].to_string(),
            stats.mean[i].to_string(),
            stats.median[i].to_string(),
            stats.standard_error[i].to_string(),
            stats.n.to_string(),
        ])?;
    }
    curve.flush().map_err(|e| io_err(&curve_path, e))?;

    let chosen: Vec<SweepSeries> = series.iter().filter(|s| s.accepted).cloned().collect();
    if chosen.is_empty() {
        log.say("no series passed the selection rule; montage skipped");
    } else {
        montage(&chosen, cfg.montage_cell)?.save(out.join(MONTAGE))?;
    }

    let report = SweepReport {
        series: series.len(),
        images: series.iter().map(|s| s.images.len()).sum(),
        accepted,
        conditions: stats.conditions.clone(),
        mean: stats.mean.clone(),
        spearman: stats.trend(),
        gap: stats.mean.last().unwrap_or(&0.0) - stats.mean.first().unwrap_or(&0.0),
    };
    write_json(&out.join(SWEEP_SUMMARY), &report)?;
    log.say(format!(
        "{} series, {} accepted, Spearman {:.3}, gap {:.3}",
        report.series, report.accepted, report.spearman, report.gap
    ));
    Ok(report)
}
