//! Teacher-student semi-supervised learning with spatiotemporal metadata.
//!
//! A metadata-consuming teacher generates pseudo-labels and distillation
//! targets for a metadata-free student. The crate bundles:
//!
//! - `dataset`: manifest I/O, synthetic spatiotemporal worlds, stratified
//!   splits, weak/strong augmentation, batch assembly
//! - `model`: compact vision transformers (teacher/student/plain variants),
//!   the metadata encoder, early- and late-fusion paths
//! - `ssl`: the pluggable SSL-algorithm interface with FixMatch and
//!   DeFixMatch, plus the distillation criteria
//! - `train`: the joint single-stage optimization loop, EMA tracking,
//!   checkpointing
//! - `eval`: accuracy/mAP, pseudo-label quality and quantity, OOD-metadata
//!   evaluation, the gray-image prior probe
//! - `config`: the experiment-config file format and named presets

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod plot;
pub mod rng;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};
