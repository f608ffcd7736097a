//! Latent-noise Bayesian reduced-rank regression.
//!
//! Multiple-output regression `Y = (XΨ + Ω)Γ + E` in which structured noise
//! `Ω` and the covariate effect `XΨ` share one latent subspace, with an
//! ordered multiplicative gamma shrinkage prior over an unbounded number of
//! components. The crate provides the Gibbs sampler (including a
//! Kronecker-eigenbasis update for `Ψ`), comparison variants, Monte-Carlo
//! checks of the prior's variance properties, a synthetic data generator,
//! scoring, permutation association tests and cross-validation.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod gibbs;
pub mod linalg;
pub mod model;
pub mod simulation;
pub mod theory;
pub mod tuning;

pub use error::{Error, Result};
pub use gibbs::{run_chain, run_chain_with, ChainOptions, ChainTrace, PreparedData, PsiMethod};
pub use model::{
    latent_snr_to_variance, marginal_covariance, predict_mean, sample_prior, sample_targets, Centering, Dataset, Dims, FactorNoise,
    ModelConfig, ModelState, PosteriorSamples, Variant,
};
