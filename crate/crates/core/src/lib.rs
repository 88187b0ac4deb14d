//! Variational structure learning for latent linear-Gaussian SCMs.
//!
//! The observed data are high-dimensional vectors `x` produced by pushing the
//! variables `z` of an unknown linear structural causal model through an
//! unknown projection. Each data row is annotated with the (possibly empty)
//! set of nodes that were intervened on when it was generated. This crate
//! infers a posterior over
//!
//! * the causal graph, parameterized as a node permutation `P` together with
//!   a strictly lower-triangular edge-weight matrix `L` so that the weighted
//!   adjacency `W = PᵀLᵀP` is acyclic by construction,
//! * the exogenous noise scale of the SCM, and
//! * the latent variables themselves,
//!
//! by maximizing a single evidence lower bound with reverse-mode gradients.
//!
//! # Layout
//!
//! * [`scm`] — permutations, triangular edge matrices, ancestral sampling,
//!   closed-form observational covariance, and Gaussian KL.
//! * [`synth`] — synthetic ground-truth generation: random DAGs, edge
//!   weights, intervention plans, and the linear / MLP / block-image
//!   projections used to produce benchmark datasets.
//! * [`tape`] — a small reverse-mode differentiation engine over scalars,
//!   vectors, and matrices, with the handful of primitives the training
//!   objective needs (including a batched DAG solve and log-space Sinkhorn
//!   steps).
//! * [`opt`] — named parameter/gradient stores and an Adam ascender.
//! * [`assignment`] — exact maximum-score bipartite assignment (used to
//!   harden doubly-stochastic matrices into permutations).
//! * [`posterior`] — the variational family: diagonal Gaussian over
//!   `(L, log σ)`, the permutation-logit MLP, Gumbel-Sinkhorn relaxation,
//!   and the prior densities.
//! * [`decoder`] — learned observation decoders (linear and 3-layer MLP).
//! * [`trainer`] — the training loop: per-epoch ELBO graph construction,
//!   gradient ascent, checkpointable state, and posterior sampling handles.
//! * [`metrics`] — structure-recovery and reconstruction metrics plus the
//!   null-graph reference row.
//! * [`persist`] — on-disk dataset containers, checkpoints, and metric
//!   traces.
//!
//! Numeric kernels are generic over [`Scalar`]; the training pipeline is
//! instantiated at [`F`] (`f64`), which the gradient checks assume.

pub mod assignment;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod opt;
pub mod persist;
pub mod posterior;
pub mod scalar;
pub mod scm;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the training pipeline and all persisted artifacts.
pub type F = f64;
/// Dense matrix of [`F`].
pub type Mat = ndarray::Array2<F>;
/// Dense vector of [`F`].
pub type Vect = ndarray::Array1<F>;
