//! Cross-domain matching for cold-start recommendation.
//!
//! Two heterogeneous behavior graphs (source and target domain) are encoded
//! with per-domain graph attention networks trained jointly on neighbor
//! similarity plus intra- and inter-domain contrastive objectives. The
//! resulting embeddings drive a multi-channel nearest-neighbor matcher that
//! turns a user's source-domain behavior into target-domain candidates.

pub mod aggregator;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
