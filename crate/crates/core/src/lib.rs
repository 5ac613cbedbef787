//! Learned-view contrastive pretraining.
//!
//! A viewmaker network produces stochastic, ℓp-budget-bounded perturbations of
//! its input. The encoder is trained to minimize a contrastive loss between two
//! such views while the viewmaker is trained to maximize it. Handcrafted view
//! pipelines, preprocessing for images, speech and wearable-sensor data, and the
//! linear-evaluation protocols used to compare view sources live alongside.

pub mod archive;
pub mod augment;
pub mod dataprep;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod export;
pub mod nn;
pub mod perturb;
pub mod objectives;
pub mod rng;
pub mod trainer;
pub mod viewmaker;
pub mod views;

pub use error::{Error, Result};
