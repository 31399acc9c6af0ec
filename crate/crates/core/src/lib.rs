//! Point-prompted pseudo-label generation.
//!
//! Given annotated points and per-object bags of class-agnostic proposals,
//! two multiple-instance-learning stages select and refine one box and mask
//! per object. See the guide under `book/` for the concepts.

pub mod data_model;
pub mod error;
pub mod features;
pub mod geometry;
pub mod mil_head;
pub mod pdg;
pub mod pipeline;
pub mod pnpg;
pub mod prm;
pub mod psm;
pub mod synth_eval;

pub use error::{Error, Result};
