//! Estimator-coupling pairs.
//!
//! A pair draws a weighted batch of cube points, maps each to a latent point
//! `z_m` and scores it with `R_0 = p(z_m, x) / q(z_m)`. The estimate of `p(x)`
//! is `R = sum_m mu_m R_0(omega_m)` and the coupling picks `z_m` with
//! probability proportional to `mu_m R_0(omega_m)`.

mod validity;

use crate::cube_sampling::{BatchDesign, DesignScratch, Method, RngStream, WeightedCubeBatch};
use crate::mappings::{CubeMap, GaussianParams};
use crate::targets::Target;
use crate::{Error, Result};

pub use validity::{check_validity, coupled_marginal, ValidityGrid};

/// Mapped batch points with their batch weights and base-estimator values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    /// `M x dim`, row-major.
    pub z_points: Vec<f64>,
    pub dim: usize,
    /// `log mu_m`.
    pub log_weights_prior: Vec<f64>,
    /// `log p(z_m, x) - log q(z_m)`.
    pub log_r0: Vec<f64>,
}

impl CandidateSet {
    pub fn new(z_points: Vec<f64>, dim: usize, log_weights_prior: Vec<f64>, log_r0: Vec<f64>) -> Result<Self> {
        let m = log_r0.len();
        if log_weights_prior.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: log_weights_prior.len() });
        }
        if z_points.len() != m * dim {
            return Err(Error::DimensionMismatch { expected: m * dim, got: z_points.len() });
        }
        let total: f64 = log_weights_prior.iter().map(|w| w.exp()).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("batch weights sum to {total}, not 1")));
        }
        Ok(Self { z_points, dim, log_weights_prior, log_r0 })
    }

    pub fn len(&self) -> usize {
        self.log_r0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_r0.is_empty()
    }

    pub fn point(&self, m: usize) -> &[f64] {
        &self.z_points[m * self.dim..(m + 1) * self.dim]
    }

    /// `log(mu_m R_0(omega_m))` for candidate `m`.
    #[inline]
    pub fn log_term(&self, m: usize) -> f64 {
        self.log_weights_prior[m] + self.log_r0[m]
    }

    /// Normalized selection probabilities `mu_m R_0 / R`. All zero for a
    /// degenerate batch.
    pub fn selection_probs(&self) -> Vec<f64> {
        let log_r = compute_log_r(self);
        (0..self.len())
            .map(|m| if log_r == f64::NEG_INFINITY { 0.0 } else { (self.log_term(m) - log_r).exp() })
            .collect()
    }

    fn clear(&mut self, dim: usize) {
        self.dim = dim;
        self.z_points.clear();
        self.log_weights_prior.clear();
        self.log_r0.clear();
    }
}

/// `log R = logsumexp_m(log mu_m + log R_0(omega_m))`. Returns `-inf` when no
/// candidate carries mass.
pub fn compute_log_r(cs: &CandidateSet) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for m in 0..cs.len() {
        max = max.max(cs.log_term(m));
    }
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    let s: f64 = (0..cs.len()).map(|m| (cs.log_term(m) - max).exp()).sum();
    max + s.ln()
}

/// Draws an index with probability `exp(log_p[m] - logsumexp(log_p))`.
fn draw_index(log_p: impl Iterator<Item = f64> + Clone, rng: &mut RngStream) -> Result<usize> {
    let max = log_p.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::DegenerateBatch);
    }
    let total: f64 = log_p.clone().map(|l| (l - max).exp()).sum();
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (m, l) in log_p.enumerate() {
        let w = (l - max).exp();
        if w > 0.0 {
            acc += w;
            last = m;
            if acc >= target {
                return Ok(m);
            }
        }
    }
    Ok(last)
}

/// Index of the candidate chosen by the coupling.
pub fn sample_coupling_index(cs: &CandidateSet, rng: &mut RngStream) -> Result<usize> {
    draw_index((0..cs.len()).map(|m| cs.log_term(m)), rng)
}

/// Selects `z_m` with probability `mu_m R_0(omega_m) / R`.
pub fn sample_coupling(cs: &CandidateSet, rng: &mut RngStream) -> Result<Vec<f64>> {
    let m = sample_coupling_index(cs, rng)?;
    Ok(cs.point(m).to_vec())
}

/// Whether the batch selector is still an explicit random variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// `R = R_0(omega_m)` with `m ~ mu`; the coupling returns `z_m`.
    Split,
    /// The selector is summed out: `R = sum_m mu_m R_0(omega_m)`.
    Marginalized,
}

/// How the marginalized coupling picks a candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Proportional to `mu_m R_0(omega_m)`.
    Weighted,
    /// The weighted probabilities assigned in reverse candidate order. Not a
    /// valid coupling; kept as a negative control for validity checks.
    Reversed,
}

/// Buffers reused across pair evaluations.
#[derive(Clone, Debug, Default)]
pub struct PairScratch {
    design: DesignScratch,
    batch: WeightedCubeBatch,
    candidates: CandidateSet,
    u: Vec<f64>,
}

impl PairScratch {
    /// The candidates from the most recent evaluation.
    pub fn candidates(&self) -> &CandidateSet {
        &self.candidates
    }
}

/// An estimator of `p(x)` together with a coupling that turns it into a
/// sampler for an approximate posterior.
#[derive(Clone, Debug)]
pub struct EstimatorCouplingPair {
    design: BatchDesign,
    map: CubeMap,
    theta: GaussianParams,
    target: Target,
    stage: Stage,
    selection: Selection,
}

/// The `M = 1` pair: one cube point, mapped through `theta`, with the
/// deterministic coupling.
pub fn base_pair(theta: GaussianParams, map: CubeMap, target: Target) -> Result<EstimatorCouplingPair> {
    if map.dim() != target.dim() {
        return Err(Error::DimensionMismatch { expected: target.dim(), got: map.dim() });
    }
    if theta.dim() != target.dim() {
        return Err(Error::DimensionMismatch { expected: target.dim(), got: theta.dim() });
    }
    Ok(EstimatorCouplingPair {
        design: BatchDesign::new(Method::Iid, 1, map.cube_dim())?,
        map,
        theta,
        target,
        stage: Stage::Split,
        selection: Selection::Weighted,
    })
}

/// Replaces the single draw of `pair0` by a batch of `m` points built with
/// `method`, keeping the selector explicit.
pub fn split_lift(pair0: &EstimatorCouplingPair, method: Method, m: usize) -> Result<EstimatorCouplingPair> {
    if pair0.design.batch_len() != 1 {
        return Err(Error::InvalidParameter("split_lift expects a single-point pair".into()));
    }
    Ok(EstimatorCouplingPair {
        design: BatchDesign::new(method, m, pair0.map.cube_dim())?,
        stage: Stage::Split,
        ..pair0.clone()
    })
}

/// Sums the discrete selector out of a split pair.
pub fn rao_blackwell_discrete(pair: &EstimatorCouplingPair) -> EstimatorCouplingPair {
    EstimatorCouplingPair { stage: Stage::Marginalized, ..pair.clone() }
}

impl EstimatorCouplingPair {
    /// Shorthand for `rao_blackwell_discrete(split_lift(base_pair(..)))`.
    pub fn new(theta: GaussianParams, map: CubeMap, target: Target, method: Method, m: usize) -> Result<Self> {
        let base = base_pair(theta, map, target)?;
        Ok(rao_blackwell_discrete(&split_lift(&base, method, m)?))
    }

    pub fn design(&self) -> &BatchDesign {
        &self.design
    }

    pub fn map(&self) -> &CubeMap {
        &self.map
    }

    pub fn theta(&self) -> &GaussianParams {
        &self.theta
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn selection(&self) -> Selection {
        self.selection
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    pub fn with_theta(&self, theta: GaussianParams) -> Result<Self> {
        if theta.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: theta.dim() });
        }
        Ok(Self { theta, ..self.clone() })
    }

    /// The negative-control variant with [`Selection::Reversed`].
    pub fn corrupt_selection(&self) -> Self {
        Self { selection: Selection::Reversed, stage: Stage::Marginalized, ..self.clone() }
    }

    /// Maps and scores an already drawn cube batch.
    pub fn candidates_from_batch(&self, batch: &WeightedCubeBatch, u: &mut Vec<f64>, out: &mut CandidateSet) {
        let d = self.dim();
        out.clear(d);
        u.resize(d, 0.0);
        out.z_points.resize(batch.len() * d, 0.0);
        for (m, omega) in batch.iter_points().enumerate() {
            self.map.to_standard_into(omega, u);
            let z = &mut out.z_points[m * d..(m + 1) * d];
            self.theta.affine_into(u, z);
            let lp = self.target.log_density(z);
            let lq = self.theta.log_q_standardized(u);
            out.log_r0.push(lp - lq);
            out.log_weights_prior.push(batch.weights[m].ln());
        }
    }

    /// Draws a batch and leaves its candidates in `scratch`.
    pub fn evaluate_into(&self, rng: &mut RngStream, scratch: &mut PairScratch) {
        self.design.sample_into(rng, &mut scratch.design, &mut scratch.batch);
        self.candidates_from_batch(&scratch.batch, &mut scratch.u, &mut scratch.candidates);
    }

    pub fn evaluate(&self, rng: &mut RngStream) -> CandidateSet {
        let mut scratch = PairScratch::default();
        self.evaluate_into(rng, &mut scratch);
        scratch.candidates
    }

    /// One draw of `log R`.
    pub fn sample_log_r(&self, rng: &mut RngStream, scratch: &mut PairScratch) -> f64 {
        self.evaluate_into(rng, scratch);
        let cs = &scratch.candidates;
        match self.stage {
            Stage::Marginalized => compute_log_r(cs),
            Stage::Split => {
                let m = draw_index(cs.log_weights_prior.iter().copied(), rng).expect("batch weights are positive");
                cs.log_r0[m]
            }
        }
    }

    /// Index chosen by this pair's coupling from the candidates in `cs`.
    pub fn select(&self, cs: &CandidateSet, rng: &mut RngStream) -> Result<usize> {
        match (self.stage, self.selection) {
            (Stage::Split, _) => draw_index(cs.log_weights_prior.iter().copied(), rng),
            (Stage::Marginalized, Selection::Weighted) => sample_coupling_index(cs, rng),
            (Stage::Marginalized, Selection::Reversed) => {
                let n = cs.len();
                draw_index((0..n).map(|m| cs.log_term(n - 1 - m)), rng)
            }
        }
    }

    /// One approximate posterior sample: a fresh batch, then the coupling.
    pub fn sample_posterior_into(&self, rng: &mut RngStream, scratch: &mut PairScratch, z: &mut [f64]) -> Result<()> {
        self.evaluate_into(rng, scratch);
        let m = self.select(&scratch.candidates, rng)?;
        z.copy_from_slice(scratch.candidates.point(m));
        Ok(())
    }

    pub fn sample_posterior(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.dim()];
        self.sample_posterior_into(rng, &mut PairScratch::default(), &mut z)?;
        Ok(z)
    }

    /// `R a(z_m | omega)` for each candidate: the mass the pair places on
    /// `z_m`, in expectation over any explicit selector. Used by the validity
    /// check.
    pub(crate) fn joint_masses(&self, cs: &CandidateSet, out: &mut Vec<f64>) {
        out.clear();
        let n = cs.len();
        match self.selection {
            Selection::Weighted => out.extend((0..n).map(|m| cs.log_term(m).exp())),
            Selection::Reversed => {
                let log_r = compute_log_r(cs);
                let r = log_r.exp();
                out.extend((0..n).map(|m| {
                    if log_r == f64::NEG_INFINITY {
                        0.0
                    } else {
                        r * (cs.log_term(n - 1 - m) - log_r).exp()
                    }
                }));
            }
        }
    }

    /// Selection probabilities `a(z_m | omega)`, used for the marginal `Q(z)`.
    pub(crate) fn coupling_probs(&self, cs: &CandidateSet, out: &mut Vec<f64>) {
        out.clear();
        let n = cs.len();
        if self.stage == Stage::Split {
            out.extend(cs.log_weights_prior.iter().map(|w| w.exp()));
            return;
        }
        let log_r = compute_log_r(cs);
        if log_r == f64::NEG_INFINITY {
            out.resize(n, 0.0);
            return;
        }
        match self.selection {
            Selection::Weighted => out.extend((0..n).map(|m| (cs.log_term(m) - log_r).exp())),
            Selection::Reversed => out.extend((0..n).map(|m| (cs.log_term(n - 1 - m) - log_r).exp())),
        }
    }
}
