mod serve;
mod sweep;
mod toy;
mod train;
mod transform;

use std::fs;
use std::path::Path;

use mitodiff::data::Dataset;

use crate::error::{CliError, Result};

pub use serve::{serve, ServeArgs};
pub use sweep::{sweep, SweepReport};
pub use toy::{make_toy, ToyReport};
pub use train::{train_clf, train_dpm, ClfReport, DpmReport};
pub use transform::{transform, TransformReport};

pub const DPM_CHECKPOINT: &str = "dpm.safetensors";
pub const DPM_LOSS: &str = "dpm_loss.csv";
pub const CLF_CHECKPOINT: &str = "classifier.safetensors";
pub const CLF_LOSS: &str = "clf_loss.csv";
pub const CLF_METRICS: &str = "clf_metrics.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const CURVE_CSV: &str = "curve.csv";
pub const SWEEP_SUMMARY: &str = "summary.json";
pub const MONTAGE: &str = "montage.png";
pub const SCORES_CSV: &str = "scores.csv";
pub const SERIES_MANIFEST: &str = "series.json";
pub const TRANSFORM_GRID: &str = "transform_grid.png";

/// Progress lines on stderr.
#[derive(Clone, Copy, Debug, Default)]
pub struct Reporter {
    pub quiet: bool,
}

impl Reporter {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CliError::runtime)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub(crate) fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(CliError::validation(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

/// Loads a dataset directory, reporting a missing one as bad input.
pub(crate) fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::validation(format!("no dataset manifest in {}", dir.display())));
    }
    Ok(Dataset::load(dir)?)
}

pub(crate) fn rel(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).display().to_string()
}

/// Lists the files a command wrote, relative to `out`.
pub(crate) fn list_outputs(out: &Path) -> Vec<String> {
    fn walk(dir: &Path, out: &Path, acc: &mut Vec<String>) {
        if let Ok(entries) = fs::read_dir(dir) {
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    walk(&p, out, acc);
                } else {
                    acc.push(rel(out, &p));
                }
            }
        }
    }
    let mut acc = Vec::new();
    walk(out, out, &mut acc);
    acc.retain(|p| p != crate::manifest::RUN_MANIFEST);
    acc.sort();
    acc
}

pub(crate) fn dir_is_nonempty(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}
