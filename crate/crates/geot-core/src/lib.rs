//! Noise-aware semi-supervised segmentation of synthetic dental-arch point
//! clouds.
//!
//! The crate trains a small per-point segmentation network from a handful
//! of labeled clouds plus many unlabeled ones. Unlabeled clouds contribute
//! through pseudo-labels whose noise is absorbed by per-point class
//! transition matrices; two geometric priors shape those matrices: a
//! point-level graph regularizer that smooths them over same-label
//! neighborhoods and sharpens them across label boundaries, and a
//! class-level Gaussian prior that ties confusion to class adjacency along
//! the arch.
//!
//! Module map:
//! - [`diffcore`]: matrices, parameter store, reverse-mode tape, gradient
//!   checker;
//! - [`knn`]: exact kd-tree neighbor search;
//! - [`cloudgen`]: synthetic arch generator, augmentations, `GEOPC` I/O;
//! - [`backbone`]: the per-point segmentation network;
//! - [`transition`]: per-point transition-matrix estimation and application;
//! - [`plgr`]: point-level affinity graphs and their regularizer;
//! - [`clgs`]: class-level Gaussian smoothing prior and fusion;
//! - [`objective`]: focal loss and the combined training objective;
//! - [`trainer`]: optimizer, schedules, batching, logging, checkpoints;
//! - [`metrics`]: confusion-matrix metrics and label upsampling.

pub mod backbone;
pub mod clgs;
pub mod cloudgen;
pub mod diffcore;
pub mod error;
pub mod fields;
pub mod knn;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod parallel;
pub mod plgr;
pub mod trainer;
pub mod transition;

pub use error::{Error, Result};
