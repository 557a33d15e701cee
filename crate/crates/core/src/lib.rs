//! Emergent-communication laboratory.
//!
//! Agents learn a discrete protocol in referential games over a synthetic
//! attribute world; the resulting language is translated into a caption
//! language by an unsupervised sequence-to-sequence pipeline and both sides
//! are scored with the metric suites in `ecmetrics` and `mtmetrics`.

pub mod agents;
pub mod corpus;
pub mod ecmetrics;
pub mod error;
pub mod fingerprint;
pub mod jsonl;
pub mod mtmetrics;
pub mod unmt;
pub mod numerics;
pub mod refgame;
pub mod world;

pub use error::{Error, Result};
