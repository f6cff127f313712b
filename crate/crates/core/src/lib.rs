//! Few-shot defect segmentation with multi-prototype reasoning, built on a
//! small reverse-mode tensor engine.

pub mod backbone;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod ifm;
pub mod layers;
pub mod metrics;
pub mod mpe;
pub mod mpr;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
