//! Divide-and-couple variational inference.
//!
//! Any non-negative unbiased estimator `R` of the likelihood `p(x)` gives a
//! stochastic lower bound `E log R <= log p(x)`. Pairing the estimator with a
//! coupling `a(z | omega)` that places its mass on the estimator's own latent
//! points yields an approximate posterior `Q(z)` whose divergence from
//! `p(z | x)` is bounded by the gap of that bound.
//!
//! The crate is organised bottom-up:
//!
//! * [`targets`] unnormalized densities `log p(z, x)` and ground-truth moments.
//! * [`cube_sampling`] batches of unit-cube points with uniform marginals
//!   (iid, antithetic, stratified, randomized QMC, Latin hypercube).
//! * [`mappings`] cube to standard normal to `q_theta` maps and `log q_theta`.
//! * [`estimator`] estimator-coupling pairs, the splitting and
//!   Rao-Blackwellization combinators, and quadrature validity checks.
//! * [`objective`] the fixed-bank empirical objective, its reparameterization
//!   gradient, Laplace initialization and the optimizers.
//! * [`diagnostics`] gaps, divergences and posterior moment errors.

// `!(x > 0.0)` is how parameter checks reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cube_sampling;
pub mod diagnostics;
mod error;
pub mod estimator;
pub mod mappings;
pub mod objective;
pub mod targets;

pub use cube_sampling::{BatchDesign, Method, RngStream, WeightedCubeBatch};
pub use error::{Error, Result};
pub use estimator::{CandidateSet, EstimatorCouplingPair};
pub use mappings::{CubeMap, GaussianParams, MapKind};
pub use targets::{MomentOracle, Target, TargetSpec};

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty slice or
/// when every entry is `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Pairwise summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if xs.len() <= LEAF {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}
