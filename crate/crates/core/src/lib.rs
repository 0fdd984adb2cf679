//! Reducibility engine for the quasi-periodically forced transport equation
//! ∂_t u = (ν + εV(ωt, x))·∇u + εW(ωt)[u] on the d-torus.
//!
//! The reduction runs in three stages: straightening of the transport field,
//! order-lowering conjugations, and a KAM diagonalization with Melnikov
//! conditions. The result is checked against a direct time integration.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops over several parallel mode arrays read better than zipped iterators.
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod constants;
pub mod dynamics;
pub mod error;
pub mod kam;
pub mod lattice;
pub mod measure;
pub mod model;
pub mod numeric;
pub mod operator;
pub mod pipeline;
pub mod smoothing;
pub mod spectrum;
pub mod straighten;

pub use error::{Error, Result};
pub use lattice::{LatticeSpec, C64};
pub use operator::{NormProfile, QPOperator};
