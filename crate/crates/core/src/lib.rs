//! Micro-expression recognition from onset-occurring-offset (3O) structure
//! candidates.
//!
//! A clip is split into `K` equal segments, one occurring frame is drawn per
//! segment, and each (onset, occurring, offset) triple is turned into a fused
//! optical-flow image. A shared CNN backbone embeds every candidate, a ruler
//! head scores their expressiveness, and the score-weighted feature is
//! classified. Training combines cross-entropy with a ranking hinge that
//! widens the gap between the top-ranked candidates and the rest.
//!
//! The crate also ships the evaluation protocols (leave-one-subject-out and
//! composite-database), the metrics, and a synthetic clip generator with
//! analytic ground-truth motion for desk-scale verification.

pub mod candidates;
pub mod config;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod image;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod protocol;
pub mod rng;
pub mod sample;
pub mod train;

pub use config::{BackboneSpec, Config, LabelSpace};
pub use error::{Error, Result};
pub use image::Image;
pub use sample::MESample;
