//! Pavement defect detection from synthesized anomalies.
//!
//! A frozen backbone yields locally aggregated patch features. Two linear
//! adaptors map normal and synthetic-anomalous features into a shared
//! space where a small discriminator separates them; at test time only the
//! normal-path adaptor and the discriminator run, and the negated
//! discriminator output is the anomaly score.

pub mod adaptation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod imageops;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod synthesis;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use par::Exec;
