//! Selective inference for the treatment effect in linear instrumental-variable
//! models after a first-stage instrument-strength pre-test.
//!
//! The pre-test is the F-test `F >= C0`, rewritten as a group-lasso program
//! on `S = (Z'Z)^{-1/2} Z'D` and randomized with Gaussian noise. When it
//! passes, the TSLS statistic is tested against its law conditional on the
//! pre-test outcome, sampled by MCMC. When it fails, the CLR statistic is
//! tested against its law conditional on failing, computed by quadrature.
//! A randomized-lasso first stage is supported as an alternative pre-test.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod clr;
pub mod distributions;
pub mod error;
pub mod inference;
pub mod io;
pub mod lasso;
pub mod linalg;
pub mod model;
mod par;
pub mod pretest;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use model::{prepare, IVDataset, ModelEstimates, Moments};
