//! Light-field depth estimation from epipolar plane images.
//!
//! The pipeline runs end-to-end at desk scale: 4D light-field slicing into
//! EPIs, refocusing-based sample augmentation, a two-branch relation-feature
//! patch network with its own reverse-mode tape and RMSprop trainer,
//! full-image inference, and BadPix/MSE evaluation. A synthetic scene
//! generator with a brute-force shear-variance oracle provides independent
//! ground truth throughout.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod lightfield;
pub mod metrics;
pub mod net;
pub mod numerics;
pub mod pfm;
pub mod refocus;
pub mod train;
pub mod synth;

pub use error::{LfError, Result};
