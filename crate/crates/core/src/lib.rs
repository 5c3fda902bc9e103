//! Spatio-angular face recognition on lenslet light-field images.
//!
//! Each selected sub-aperture view is turned into a spatial description by a
//! frozen backend; the ordered descriptions are modeled by a peephole LSTM
//! whose per-cell softmax outputs are averaged (and, for two-branch
//! topologies, sum-fused) into an identity decision.

pub mod angular;
pub mod classify;
pub mod commands;
pub mod config;
pub mod descriptor;
pub mod error;
pub mod lightfield;
pub mod numerics;
pub mod pipeline;
pub mod protocol;
pub mod selection;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
