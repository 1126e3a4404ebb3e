//! Graph-aware linear mixed-effects modelling for populations of weighted
//! networks that share a node set and a community partition.
//!
//! Edge weights of subject `m` are stacked cell by cell into `y_m` and modelled as
//!
//! ```text
//! y_m = X_m α + Z γ_m + ε_m,   γ_m ~ N(0, U),   ε_m ~ N(0, V)
//! ```
//!
//! where `α` holds cell-level effects `β` and sum-to-zero edge deviations `η`,
//! `Z` maps edges to cells and `V` is diagonal or block-diagonal by cell.
//!
//! * [`netdata`]: partitions, vectorisation, design matrices and file formats.
//! * [`covstruct`]: `Σ = V + Z U Zᵀ` with low-rank solves and log-determinants.
//! * [`estim`]: OLS, GLS and EM maximum likelihood fits.
//! * [`infer`]: cell and edge tests, intervals and multiple-testing corrections.
//! * [`refine`]: community refinement by K-means on edge effects or by likelihood.
//! * [`simlab`]: data generation and estimator / null-split validation studies.

pub mod covstruct;
pub mod error;
pub mod estim;
pub mod infer;
mod linalg;
pub mod netdata;
pub mod refine;
pub mod simlab;

pub use error::{Error, Result};
