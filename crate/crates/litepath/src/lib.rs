//! LitePath: split-encoder whole-slide inference with adaptive patch
//! selection.
//!
//! The library implements the full stack needed to study early-exit slide
//! inference on a desk machine: a splittable ViT-style encoder, an
//! attention-based multiple-instance head, a shallow-feature scoring network,
//! the hybrid uniform/attention patch selector, the three training stages
//! that wire them together, an analytic FLOPs model, and the deployability
//! metrics used to compare pipelines (Macro-AUC with bootstrap confidence
//! intervals, non-inferiority tests, D-Score, ranking scores).
//!
//! Real whole-slide decoding is out of scope; slides are synthetic, with a
//! planted class signal, so every claim the code makes can be checked
//! end-to-end in minutes. See the `book/` directory for a guided tour.

pub mod error;
pub mod numerics;

pub mod aps;
pub mod flops;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
