//! Fixed-point factorized networks.
//!
//! Weight matrices of conv and fc layers are approximated by `X D Y^T` with
//! ternary `X`, `Y` and a nonnegative diagonal `D`, then fine-tuned with a
//! straight-through estimator. The guide in `book/` walks through each step.

pub mod error;
pub mod io;
pub mod sdd;
pub mod tensor;
pub mod recovery;
pub mod balancing;
pub mod layers;
pub mod cost;
pub mod dataset;
pub mod finetune;
pub mod pipeline;
pub mod toy;

pub use error::{FfnError, Result};
pub use layers::{Model, ModelLayer};
pub use tensor::{DenseMatrix, DiagonalScale, LayerDescriptor, TernaryMatrix};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/decomposition.md")]
    mod decomposition {}
    #[doc = include_str!("../../../book/src/recovery.md")]
    mod recovery {}
    #[doc = include_str!("../../../book/src/layers.md")]
    mod layers {}
    #[doc = include_str!("../../../book/src/finetuning.md")]
    mod finetuning {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
