//! Annotation backend: annotators score patches in shuffled, repeated
//! sessions, votes go to an append-only log, and labels are aggregated from
//! that log. Reviewers can also mark the earliest and the convincing frame of
//! a transformation series.

pub mod api;
pub mod catalog;
pub mod error;
pub mod session;
pub mod store;

pub use api::{router, serve, ANNOTATOR_HEADER};
pub use catalog::{Catalog, SeriesFrames, SeriesManifestEntry};
pub use error::{Result, ServiceError};
pub use session::{build_queue, Session, SessionStatus, DEFAULT_REPEATS};
pub use store::{
    Histogram, Label, Mark, MarkRequest, NextItem, Progress, SeriesView, SessionSummary, Store,
    VoteAck, VoteEntry, VoteRequest,
};
