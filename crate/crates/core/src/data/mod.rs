//! Patch records, annotation votes, CSV ingestion, patch extraction, the
//! procedural toy dataset and on-disk dataset persistence.

mod dataset;
mod extract;
mod ingest;
mod record;
mod toy;
mod votes;

pub use dataset::{Dataset, SlideInfo};
pub use extract::extract_patch;
pub use ingest::{ingest_annotations, ingest_reader, ANNOTATION_HEADER};
pub use record::PatchRecord;
pub use toy::{render_toy, toy_dataset, toy_records, ToySample, ToySpec};
pub use votes::{aggregate_votes, vote_mean, VoteRecord, VoteValue, MAX_ROUNDS};
