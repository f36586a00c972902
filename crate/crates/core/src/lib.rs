//! Source-free domain-adaptive object detection on small synthetic scenes.
//!
//! A compact two-stage detector is trained on a labelled source domain and
//! then adapted to an unlabelled target domain with a mean-teacher loop,
//! without touching source data again.

pub mod afsp;
pub mod checkpoint;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod fsguard;
pub mod detector;
pub mod geom;
pub mod image;
pub mod msp;
pub mod pfd;
pub mod synthdata;

pub use error::{Error, Result};
