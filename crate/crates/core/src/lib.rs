//! Target-trial emulation on timestamped patient event streams.
//!
//! The pipeline slices each patient's timeline into prone and supine
//! sessions ([`ingest`]), turns sessions into a trial-like cohort of
//! observations ([`cohort`]) and estimates the average treatment effect of
//! proning with six estimators from different modeling families:
//!
//! | tag        | estimator                                        | module      |
//! |------------|--------------------------------------------------|-------------|
//! | `lr`       | ordinary least squares, treatment coefficient    | [`linprop`] |
//! | `dripw`    | inverse-probability-weighted least squares       | [`linprop`] |
//! | `blocking` | propensity-score stratification                  | [`linprop`] |
//! | `bart`     | Bayesian additive regression trees               | [`bart`]    |
//! | `tarnet`   | shared representation with two outcome heads     | [`cfrnet`]  |
//! | `cfr`      | TARNet plus a Wasserstein imbalance penalty      | [`cfrnet`]  |
//!
//! [`evaluation`] runs the bootstrap protocol over any subset of those models
//! and [`synthetic`] provides data-generating processes with known potential
//! outcomes so every estimator can be checked against ground truth.

pub mod bart;
pub mod cfrnet;
pub mod cohort;
pub mod data;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod ingest;
pub mod linprop;
pub mod reference;
pub mod rng;
pub mod synthetic;

pub use data::Dataset;
pub use error::{Error, Result};
pub use estimator::{ModelConfig, ModelTag};

