//! Cross-modal contrastive pretraining for needle-tip OCT tissue classification.
//!
//! The pipeline runs from synthetic phantom recordings ([`phantom`]) through
//! M-scan preprocessing and crop extraction ([`preprocess`]) to paired
//! intensity/phase encoders ([`model`]) trained with an intensity-anchored
//! contrastive objective ([`objectives`]) and fine-tuned for four-way tissue
//! classification under label-fraction sweeps ([`train`]).

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod format;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod par;
pub mod phantom;
pub mod preprocess;
pub mod seed;
pub mod sweep;
pub mod tissue;
pub mod train;

pub use error::{Error, Result};
pub use tissue::{Modality, TissueClass, NUM_CLASSES};
