//! Prototype-calibrated hierarchical action recognition over fixed feature
//! embeddings.
//!
//! Two streams (e.g. RGB and optical flow) each carry a body-level and an
//! action-level classifier. Training adds a hierarchical prediction loss, a
//! prototype calibration loss that pulls ambiguous samples toward or away from
//! class prototypes, and a diversity loss that spreads the prototypes apart.

pub mod ablation;
pub mod certify;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod partition;
pub mod prototype;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
