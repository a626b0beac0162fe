//! Covariate-equivariant, site-invariant representation learning for
//! pooling tabular datasets collected at several sites.
//!
//! A first stage learns an encoder onto the unit sphere together with a map
//! τ into SO(n) such that a change of the nuisance covariate acts on τ by a
//! known rotation. A second stage builds codes Φ(ℓ) = τ(ℓ)·b(τ(ℓ)ᵀℓ) that
//! keep this structure while an MMD penalty removes site differences.

// `!(x > 0.0)` is used on purpose so that NaN fails validation; index loops
// mirror the row/column math they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod lie_group;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
