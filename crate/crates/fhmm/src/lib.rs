//! Factorial hidden Markov models for vector time series: exact and
//! approximate EM fitting, Viterbi decoding, analytic-Hessian and bootstrap
//! confidence regions, cross-validation model selection, thermal
//! two-level-fluctuator noise generation, and second-spectrum Gaussianity
//! analysis.

pub mod em;
pub mod error;
pub mod exact;
pub mod gibbs;
pub mod hessian;
pub mod mean_field;
pub mod model;
pub mod mstep;
pub mod noise;
pub mod runner;
pub mod select;
pub mod spectral;
pub mod sva;
pub mod viterbi;

mod util;

pub use error::{Error, Result};
pub use model::{Dataset, ModelParams, ModelSpec, RealizationTable};
