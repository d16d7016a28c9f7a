use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

/// A transformation series as served to reviewers: one PNG frame per stop time.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrames {
    pub stops: Vec<usize>,
    pub frames: Vec<Vec<u8>>,
}

/// On-disk description of one series; frame paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesManifestEntry {
    pub series_id: String,
    pub stops: Vec<usize>,
    pub frames: Vec<String>,
}

/// Read-only content the service presents: patch images and series frames.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    patches: BTreeMap<String, Vec<u8>>,
    series: BTreeMap<String, SeriesFrames>,
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) {
        return Err(ServiceError::validation(format!("invalid id {id:?}")));
    }
    Ok(())
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_patch(&mut self, id: impl Into<String>, png: Vec<u8>) -> Result<()> {
        let id = id.into();
        check_id(&id)?;
        self.patches.insert(id, png);
        Ok(())
    }

    pub fn insert_series(&mut self, id: impl Into<String>, series: SeriesFrames) -> Result<()> {
        let id = id.into();
        check_id(&id)?;
        if series.frames.is_empty() || series.frames.len() != series.stops.len() {
            return Err(ServiceError::validation(format!(
                "series {id}: {} frames for {} stop times",
                series.frames.len(),
                series.stops.len()
            )));
        }
        self.series.insert(id, series);
        Ok(())
    }

    /// Registers every `*.png` in `dir`, keyed by file stem.
    pub fn load_patch_dir(&mut self, dir: impl AsRef<Path>) -> Result<usize> {
        let dir = dir.as_ref();
        let entries = fs::read_dir(dir)
            .map_err(|e| ServiceError::storage(format!("{}: {e}", dir.display())))?;
        let mut n = 0;
        for entry in entries {
            let path = entry.map_err(ServiceError::storage)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let bytes = fs::read(&path)
                .map_err(|e| ServiceError::storage(format!("{}: {e}", path.display())))?;
            self.insert_patch(stem, bytes)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn load_series_manifest(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ServiceError::storage(format!("{}: {e}", path.display())))?;
        let entries: Vec<SeriesManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| ServiceError::validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let n = entries.len();
        for entry in entries {
            let frames = entry
                .frames
                .iter()
                .map(|f| {
                    let p = base.join(f);
                    fs::read(&p).map_err(|e| ServiceError::storage(format!("{}: {e}", p.display())))
                })
                .collect::<Result<Vec<_>>>()?;
            self.insert_series(entry.series_id, SeriesFrames { stops: entry.stops, frames })?;
        }
        Ok(n)
    }

    pub fn patch(&self, id: &str) -> Option<&[u8]> {
        self.patches.get(id).map(Vec::as_slice)
    }

    pub fn series(&self, id: &str) -> Option<&SeriesFrames> {
        self.series.get(id)
    }

    pub fn patch_ids(&self) -> impl Iterator<Item = &str> {
        self.patches.keys().map(String::as_str)
    }

    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    pub fn series_count(&self) -> usize {
        self.series.len()
    }
}
