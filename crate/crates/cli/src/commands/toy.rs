use std::path::Path;

use mitodiff::data::{toy_dataset, toy_records, Dataset, SlideInfo};
use serde::Serialize;

use super::{dir_is_nonempty, Reporter};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, Serialize)]
pub struct ToyReport {
    pub patches: usize,
    pub slides: usize,
    pub positives: usize,
}

/// Renders `toy_n` synthetic cells and writes them as a dataset directory.
pub fn make_toy(cfg: &RunConfig, out: &Path, force: bool, log: Reporter) -> Result<ToyReport> {
    if dir_is_nonempty(out) && !force {
        return Err(CliError::validation(format!(
            "{} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    if force && out.join("patches").is_dir() {
        std::fs::remove_dir_all(out.join("patches")).map_err(|e| super::io_err(out, e))?;
    }
    log.say(format!("rendering {} toy cells at {} px", cfg.toy_n, cfg.side));
    let samples = toy_dataset(cfg.toy_n, cfg.toy_seed, cfg.side)?;
    let (records, height) = toy_records(&samples, cfg.toy_seed, cfg.toy_per_slide);
    let slides = records
        .iter()
        .map(|r| (r.slide_id.clone(), SlideInfo { width: height, height }))
        .collect();
    let ds = Dataset { side: cfg.side, slides, records };
    ds.save(out)?;
    Ok(ToyReport {
        patches: ds.records.len(),
        slides: ds.slides.len(),
        positives: ds.records.iter().filter(|r| r.is_positive()).count(),
    })
}
