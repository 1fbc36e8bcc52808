//! Sparse link prediction for large bipartite graphs.
//!
//! The model: an observed binary adjacency A over users x hosts is treated
//! as a censored Poisson count matrix, N_ij ~ Poisson(psi_ij) with
//! A_ij = 1{N_ij > 0}, so P(A_ij = 1) = 1 - exp(-psi_ij). The rate factors
//! into R latent components plus one component per active pair of
//! categorical node covariates:
//!
//!   psi_ij = sum_r alpha_ir beta_jr + sum_{k,h} phi_kh x_ik y_jh
//!
//! with gamma priors on all loadings and a second level of gamma-distributed
//! rates for automatic scale adaptation. Everything downstream exploits the
//! censoring trick: likelihoods, variational updates, and Gibbs conditionals
//! all touch only the observed edges plus factorized totals, never the dense
//! zero set.
//!
//! Module map:
//!
//! * [`graph`]   -- sparse bipartite graphs, covariates, temporal sequences
//! * [`model`]   -- rate decomposition, link probability, sparse likelihood
//! * [`cavi`]    -- coordinate-ascent variational inference
//! * [`gibbs`]   -- collapsed-count Gibbs sampler
//! * [`seasonal`] -- periodic multiplicative activity adjustments
//! * [`joint`]   -- two graphs sharing one user factor block
//! * [`synth`]   -- generative sampling for simulation studies
//! * [`eval`]    -- scoring, negative sampling, AUC, reference baselines
//! * [`io`]      -- file formats: edge logs, covariates, checkpoints

pub mod cavi;
pub mod error;
pub mod eval;
pub mod gibbs;
pub mod graph;
pub mod io;
pub mod joint;
pub mod math;
pub mod model;
pub mod rng;
pub mod seasonal;
pub mod synth;

pub use error::{Error, Result};
