//! Shape- and spatio-temporal affinity learning for online 3D multi-object
//! tracking.
//!
//! The pipeline: a simulator ([`sim`]) produces scenes with ground-truth
//! trajectories, corrupted detections and a BEV feature field; [`residuals`]
//! turns boxes and BEV samples into pairwise residuals; [`affinity`] learns
//! anchors and an affinity matrix over them; [`tracker`] turns affinities into
//! tracks; [`metrics`] scores tracks with AMOTA/AMOTP.

pub mod affinity;
pub mod cli;
pub mod config;
pub mod domain;
pub mod error;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod residuals;
pub mod sim;
pub mod tracker;

pub use error::{Error, Result};
