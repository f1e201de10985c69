//! Longitudinal surface-based spatial Bayesian GLM for task fMRI.
//!
//! The crate covers the whole analysis chain on a triangulated cortical
//! patch: finite-element SPDE priors ([`surface`]), regressor construction
//! and nuisance removal ([`prep`]), leverage scrubbing ([`scrub`]), the
//! massive-univariate baseline ([`classical`]), the pooled-visit Bayesian
//! GLM ([`bayes`]), joint excursion sets ([`excursions`]), activation-area
//! summaries ([`summary`]), the downstream mixed models ([`longitudinal`])
//! and a generative simulator ([`synth`]) used throughout the tests.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod band;
pub mod bayes;
pub mod classical;
pub mod error;
pub mod excursions;
pub mod io;
pub mod longitudinal;
pub mod optim;
pub mod pipeline;
pub mod prep;
pub mod scrub;
pub mod summary;
pub mod surface;
pub mod synth;

pub use error::{Error, Result};
