use serde::{Deserialize, Serialize};

use super::votes::{aggregate_votes, VoteRecord};
use crate::error::{Error, Result};
use crate::image::ImagePatch;

/// One annotated cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub slide_id: String,
    /// Pixel coordinates `(x, y)` of the nucleus on its slide.
    pub center: Option<(f64, f64)>,
    #[serde(skip)]
    pub image: Option<ImagePatch>,
    #[serde(default)]
    pub votes: Vec<VoteRecord>,
    pub label: f64,
}

impl PatchRecord {
    /// Builds a record whose label is the aggregate of `votes`.
    pub fn from_votes(
        patch_id: impl Into<String>,
        slide_id: impl Into<String>,
        center: Option<(f64, f64)>,
        votes: Vec<VoteRecord>,
    ) -> Result<Self> {
        let label = aggregate_votes(&votes)?;
        let r = Self {
            patch_id: patch_id.into(),
            slide_id: slide_id.into(),
            center,
            image: None,
            votes,
            label,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_id.is_empty() {
            return Err(Error::validation("record has an empty patch id"));
        }
        if !(0.0..=1.0).contains(&self.label) {
            return Err(Error::validation(format!(
                "{}: label {} outside [0, 1]",
                self.patch_id, self.label
            )));
        }
        for v in &self.votes {
            v.validate()?;
        }
        if !self.votes.is_empty() && aggregate_votes(&self.votes)? != self.label {
            return Err(Error::validation(format!(
                "{}: label does not match its votes",
                self.patch_id
            )));
        }
        Ok(())
    }

    /// Binary view of the label: positive when strictly above one half.
    pub fn is_positive(&self) -> bool {
        self.label > 0.5
    }
}
