//! Embedded ridge approximation of vector-valued fields.
//!
//! Each component of a field is approximated by a low-dimensional ridge
//! function `g_i(W_iᵀx)` fitted without gradients ([`ridge_fit`]). The nodal
//! ridges are combined into the gradient covariance of a weighted quantity of
//! interest, whose leading eigenvectors give its dimension-reducing subspace
//! ([`embedded`]). Ridge directions of spatially neighbouring nodes can be
//! compressed and recovered ([`compression`]).
//!
//! The crate is `no_std` and needs only `alloc`.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod compression;
pub mod embedded;
pub mod error;
pub mod ridge_fit;
pub mod ridge_model;
pub mod subspace;
pub mod synthetic;

pub use error::{Error, Result};
pub use ridge_model::{NodalRidgeModel, RidgeProfile};
pub use subspace::{Subspace, SymmetricSpectrum};
