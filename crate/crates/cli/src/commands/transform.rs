use std::fs;
use std::path::Path;

use image::RgbImage;
use mitodiff::classifier::PatchScorer;
use mitodiff::diffusion::edit_series;
use mitodiff::ImagePatch;
use mitodiff_annotate::SeriesManifestEntry;
use serde::Serialize;

use super::sweep::load_models;
use super::{create_dir, io_err, load_dataset, write_json, Reporter, SCORES_CSV, SERIES_MANIFEST, TRANSFORM_GRID};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, Serialize)]
pub struct TransformReport {
    pub inputs: Vec<String>,
    pub stops: Vec<usize>,
    pub images: usize,
}

/// Inputs from a dataset directory (its negatives, in record order), a
/// directory of PNGs (by file name) or a single PNG.
fn collect_inputs(path: &Path, limit: usize) -> Result<Vec<(String, ImagePatch)>> {
    let mut inputs = Vec::new();
    if path.join("manifest.json").is_file() {
        let ds = load_dataset(path)?;
        for r in ds.records.into_iter().filter(|r| !r.is_positive()) {
            let img = r.image.ok_or_else(|| CliError::runtime(format!("{} has no image", r.patch_id)))?;
            inputs.push((r.patch_id, img));
        }
    } else if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
            .collect();
        files.sort();
        for f in files {
            let id = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            inputs.push((id, ImagePatch::load_png(&f)?));
        }
    } else if path.is_file() {
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        inputs.push((id, ImagePatch::load_png(path)?));
    } else {
        return Err(CliError::validation(format!("input path {} does not exist", path.display())));
    }
    inputs.truncate(limit);
    if inputs.is_empty() {
        return Err(CliError::validation(format!("no input patches found in {}", path.display())));
    }
    Ok(inputs)
}

/// Edits each input towards `transform_condition` at every stop time.
/// Writes `series/<id>/stop_NNNN.png`, one strip per input under `strips/`,
/// `transform_grid.png` (one row per input), `scores.csv` and
/// `series.json` for the annotation server.
pub fn transform(
    cfg: &RunConfig,
    dpm: &Path,
    clf: &Path,
    inputs: &Path,
    out: &Path,
    log: Reporter,
) -> Result<TransformReport> {
    let (model, ensemble) = load_models(dpm, clf)?;
    let inputs = collect_inputs(inputs, cfg.transform_limit)?;
    if let Some((id, img)) = inputs.iter().find(|(_, i)| i.side() != model.side) {
        return Err(CliError::validation(format!(
            "input {id} is {} px, the denoiser expects {} px",
            img.side(),
            model.side
        )));
    }
    let stops = &cfg.transform_stops;
    let side = model.side as u32;
    let mut grid = RgbImage::new(side * stops.len() as u32, side * inputs.len() as u32);
    create_dir(&out.join("strips"))?;
    let csv_path = out.join(SCORES_CSV);
    let mut csv = csv::Writer::from_path(&csv_path)?;
    csv.write_record(["input", "stop", "score"])?;
    let mut manifest = Vec::with_capacity(inputs.len());

    for (row, (id, img)) in inputs.iter().enumerate() {
        let series = edit_series(&model, &model.schedule, img, stops, cfg.transform_condition, cfg.transform_seed + row as u64)?;
        let scores = ensemble.score_batch(&series.outputs)?;
        let dir = out.join("series").join(id);
        create_dir(&dir)?;
        let mut strip = RgbImage::new(side * stops.len() as u32, side);
        let mut frames = Vec::with_capacity(stops.len());
        for (col, (frame, &stop)) in series.outputs.iter().zip(stops).enumerate() {
            let name = format!("stop_{stop:04}.png");
            frame.save_png(dir.join(&name))?;
            frames.push(format!("series/{id}/{name}"));
            let tile = frame.to_rgb8();
            image::imageops::replace(&mut strip, &tile, (col as u32 * side) as i64, 0);
            image::imageops::replace(&mut grid, &tile, (col as u32 * side) as i64, (row as u32 * side) as i64);
            csv.write_record([id.clone(), stop.to_string(), scores[col].to_string()])?;
        }
        strip.save(out.join("strips").join(format!("{id}.png")))?;
        manifest.push(SeriesManifestEntry { series_id: id.clone(), stops: stops.clone(), frames });
        log.say(format!("edited {id}: scores {:?}", scores.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>()));
    }
    csv.flush().map_err(|e| io_err(&csv_path, e))?;
    grid.save(out.join(TRANSFORM_GRID))?;
    write_json(&out.join(SERIES_MANIFEST), &manifest)?;
    Ok(TransformReport {
        inputs: inputs.into_iter().map(|(id, _)| id).collect(),
        stops: stops.clone(),
        images: manifest.len() * stops.len(),
    })
}
