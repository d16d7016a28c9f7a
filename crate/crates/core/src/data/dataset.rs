use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::PatchRecord;
use crate::error::{Error, Result};
use crate::image::ImagePatch;

const MANIFEST: &str = "manifest.json";
const PATCH_DIR: &str = "patches";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideInfo {
    pub width: f64,
    pub height: f64,
}

/// Labeled patches plus the slide geometry needed for spatial splits.
/// On disk: `manifest.json` and one PNG per record under `patches/`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub side: usize,
    pub slides: BTreeMap<String, SlideInfo>,
    pub records: Vec<PatchRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(&r.patch_id) {
                return Err(Error::validation(format!("duplicate patch_id {}", r.patch_id)));
            }
            if let Some(img) = &r.image {
                if img.side() != self.side {
                    return Err(Error::validation(format!(
                        "{}: patch side {} differs from dataset side {}",
                        r.patch_id,
                        img.side(),
                        self.side
                    )));
                }
            }
        }
        Ok(())
    }

    /// Slide heights keyed by slide id.
    pub fn heights(&self) -> BTreeMap<String, f64> {
        self.slides.iter().map(|(k, v)| (k.clone(), v.height)).collect()
    }

    /// `(image, label)` pairs; every record must have its image loaded.
    pub fn labeled_images(&self) -> Result<Vec<(ImagePatch, f32)>> {
        self.records
            .iter()
            .map(|r| {
                r.image
                    .clone()
                    .map(|i| (i, r.label as f32))
                    .ok_or_else(|| Error::state(format!("{} has no image loaded", r.patch_id)))
            })
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        let patches = dir.join(PATCH_DIR);
        std::fs::create_dir_all(&patches).map_err(|e| Error::io(&patches, e))?;
        for r in &self.records {
            let img = r
                .image
                .as_ref()
                .ok_or_else(|| Error::state(format!("{} has no image to save", r.patch_id)))?;
            img.save_png(patches.join(format!("{}.png", r.patch_id)))?;
        }
        let path = dir.join(MANIFEST);
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut ds: Dataset = serde_json::from_slice(&bytes)?;
        for r in &mut ds.records {
            r.image = Some(ImagePatch::load_png(dir.join(PATCH_DIR).join(format!("{}.png", r.patch_id)))?);
        }
        ds.validate()?;
        Ok(ds)
    }
}
