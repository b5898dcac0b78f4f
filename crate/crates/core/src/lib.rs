//! Missing-annotation and negative-region mining for partially labeled lesion
//! detection data, a gated multi-expert scorer, and volumetric FROC evaluation.

pub mod detector;
pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mining;
pub mod phantom;
pub mod pipeline;
pub mod seed;
pub mod volio;

pub use error::{Error, Result};
