//! Ground-truth posterior moments: analytic, tensor-grid trapezoid
//! quadrature, or long-run self-normalized importance sampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::families::{cholesky, student_t_log_norm};
use super::Target;
use crate::cube_sampling::RngStream;
use crate::mappings::special::inv_norm_cdf;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    Analytic,
    GridQuadrature,
    LongRunImportanceSampling,
}

/// Mean and covariance of `p(z | x)`. `cov` is row-major `dim x dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentOracle {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub source: MomentSource,
}

impl MomentOracle {
    /// Checks shape, symmetry and positive definiteness.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, source: MomentSource) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, got: cov.len() });
        }
        cholesky(&cov, d)?;
        Ok(Self { mean, cov, source })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| self.cov[i * d + i]).collect()
    }
}

/// Diagonal multivariate Student-t used as an importance proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentTProposal {
    loc: Vec<f64>,
    scale: Vec<f64>,
    dof: usize,
    log_norm: f64,
}

impl StudentTProposal {
    pub fn new(loc: Vec<f64>, scale: Vec<f64>, dof: usize) -> Result<Self> {
        if loc.len() != scale.len() {
            return Err(Error::DimensionMismatch { expected: loc.len(), got: scale.len() });
        }
        if dof == 0 || scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("Student-t needs positive scales and dof".into()));
        }
        let log_norm = student_t_log_norm(dof as f64, loc.len()) - scale.iter().map(|s| s.ln()).sum::<f64>();
        Ok(Self { loc, scale, dof, log_norm })
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    /// Draws one point and returns its log density.
    pub fn sample_into(&self, rng: &mut RngStream, z: &mut [f64]) -> f64 {
        let nu = self.dof as f64;
        let chi2: f64 = (0..self.dof)
            .map(|_| {
                let g = inv_norm_cdf(open_unit(rng.uniform()));
                g * g
            })
            .sum();
        let k = (nu / chi2).sqrt();
        let mut r2 = 0.0;
        for (i, zi) in z.iter_mut().enumerate() {
            let t = k * inv_norm_cdf(open_unit(rng.uniform()));
            r2 += t * t;
            *zi = self.loc[i] + self.scale[i] * t;
        }
        self.log_norm - 0.5 * (nu + self.dim() as f64) * (r2 / nu).ln_1p()
    }

    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        let nu = self.dof as f64;
        let r2: f64 = z.iter().zip(&self.loc).zip(&self.scale).map(|((z, m), s)| ((z - m) / s).powi(2)).sum();
        self.log_norm - 0.5 * (nu + self.dim() as f64) * (r2 / nu).ln_1p()
    }
}

/// Weighted first and second moments accumulated against a running log-shift,
/// so weights spanning hundreds of orders of magnitude stay representable.
#[derive(Clone, Debug)]
struct WeightedMoments {
    shift: f64,
    sw: f64,
    sw2: f64,
    edge: f64,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl WeightedMoments {
    fn new(d: usize) -> Self {
        Self { shift: f64::NEG_INFINITY, sw: 0.0, sw2: 0.0, edge: 0.0, s1: vec![0.0; d], s2: vec![0.0; d * d] }
    }

    fn rescale(&mut self, shift: f64) {
        if self.shift > f64::NEG_INFINITY {
            let f = (self.shift - shift).exp();
            self.sw *= f;
            self.sw2 *= f * f;
            self.edge *= f;
            self.s1.iter_mut().for_each(|x| *x *= f);
            self.s2.iter_mut().for_each(|x| *x *= f);
        }
        self.shift = shift;
    }

    fn add(&mut self, log_w: f64, z: &[f64], on_edge: bool) {
        if log_w == f64::NEG_INFINITY || log_w.is_nan() {
            return;
        }
        if log_w > self.shift {
            self.rescale(log_w);
        }
        let w = (log_w - self.shift).exp();
        self.sw += w;
        self.sw2 += w * w;
        if on_edge {
            self.edge += w;
        }
        let d = z.len();
        for i in 0..d {
            let wz = w * z[i];
            self.s1[i] += wz;
            for j in 0..=i {
                self.s2[i * d + j] += wz * z[j];
            }
        }
    }

    fn merge(mut self, mut other: Self) -> Self {
        if other.shift > self.shift {
            std::mem::swap(&mut self, &mut other);
        }
        if other.shift == f64::NEG_INFINITY {
            return self;
        }
        other.rescale(self.shift);
        self.sw += other.sw;
        self.sw2 += other.sw2;
        self.edge += other.edge;
        self.s1.iter_mut().zip(&other.s1).for_each(|(a, b)| *a += b);
        self.s2.iter_mut().zip(&other.s2).for_each(|(a, b)| *a += b);
        self
    }

    fn log_total(&self) -> f64 {
        self.shift + self.sw.ln()
    }

    fn ess(&self) -> f64 {
        self.sw * self.sw / self.sw2
    }

    fn mean_cov(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.s1.len();
        let mean: Vec<f64> = self.s1.iter().map(|s| s / self.sw).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let c = self.s2[i * d + j] / self.sw - mean[i] * mean[j];
                cov[i * d + j] = c;
                cov[j * d + i] = c;
            }
        }
        (mean, cov)
    }
}

/// Result of a converged tensor-grid trapezoid integration.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSummary {
    pub log_normalizer: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    pub nodes_per_axis: usize,
    /// Share of the mass on the outermost layer of nodes.
    pub edge_fraction: f64,
}

fn grid_pass(t: &Target, bounds: &[(f64, f64)], n: usize) -> WeightedMoments {
    let d = bounds.len();
    let step: Vec<f64> = bounds.iter().map(|(lo, hi)| (hi - lo) / (n - 1) as f64).collect();
    let log_cell: f64 = step.iter().map(|h| h.ln()).sum();
    let total = n.pow(d as u32);
    // Rows along the last axis form the parallel unit; merged in index order.
    let rows = total / n;
    let parts: Vec<WeightedMoments> = (0..rows)
        .into_par_iter()
        .map(|row| {
            let mut acc = WeightedMoments::new(d);
            let mut z = vec![0.0; d];
            let mut idx = vec![0usize; d];
            let mut r = row;
            for k in (0..d - 1).rev() {
                idx[k] = r % n;
                r /= n;
            }
            for last in 0..n {
                idx[d - 1] = last;
                let mut log_w = log_cell;
                let mut edge = false;
                for k in 0..d {
                    z[k] = bounds[k].0 + idx[k] as f64 * step[k];
                    if idx[k] == 0 || idx[k] == n - 1 {
                        log_w -= std::f64::consts::LN_2;
                        edge = true;
                    }
                }
                acc.add(log_w + t.log_density(&z), &z, edge);
            }
            acc
        })
        .collect();
    parts.into_iter().fold(WeightedMoments::new(d), WeightedMoments::merge)
}

const GRID_MEAN_TOL: f64 = 1e-4;
const EDGE_TOL: f64 = 1e-9;
const MAX_WIDENINGS: usize = 4;

/// Trapezoid quadrature of `exp(log p)` and its first two moments over the
/// target's bounds (`dim <= 2`).
///
/// The grid is widened by 1.5x while more than `1e-9` of the mass is on the
/// boundary, and refined by halving the step until the mean moves by less than
/// `1e-4` between successive grids.
pub fn grid_quadrature(t: &Target) -> Result<GridSummary> {
    let d = t.dim();
    if d > 2 {
        return Err(Error::InvalidParameter(format!("grid quadrature needs dim <= 2, got {d}")));
    }
    let mut bounds = t
        .bounds()
        .ok_or_else(|| Error::InvalidParameter(format!("target `{}` has no quadrature bounds", t.name())))?
        .to_vec();
    let (mut n, n_max) = if d == 1 { (100_001, 1_600_001) } else { (801, 6_401) };
    let mut widenings = 0;
    let mut coarse = grid_pass(t, &bounds, n);
    loop {
        let fine_n = 2 * n - 1;
        let fine = grid_pass(t, &bounds, fine_n);
        if !(fine.sw > 0.0 && fine.sw.is_finite()) {
            return Err(Error::QuadratureNonConvergent(format!("no finite mass on the grid for `{}`", t.name())));
        }
        let edge_fraction = fine.edge / fine.sw;
        if edge_fraction > EDGE_TOL {
            widenings += 1;
            if widenings > MAX_WIDENINGS {
                return Err(Error::QuadratureNonConvergent(format!(
                    "mass still on the boundary after {MAX_WIDENINGS} widenings ({edge_fraction:.2e})"
                )));
            }
            for b in bounds.iter_mut() {
                let (c, h) = (0.5 * (b.0 + b.1), 0.75 * (b.1 - b.0));
                *b = (c - h, c + h);
            }
            coarse = grid_pass(t, &bounds, n);
            continue;
        }
        let (m_coarse, _) = coarse.mean_cov();
        let (mean, cov) = fine.mean_cov();
        let shift = m_coarse.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if shift < GRID_MEAN_TOL {
            return Ok(GridSummary {
                log_normalizer: fine.log_total(),
                mean,
                cov,
                bounds,
                nodes_per_axis: fine_n,
                edge_fraction,
            });
        }
        if fine_n >= n_max {
            return Err(Error::QuadratureNonConvergent(format!(
                "mean moved by {shift:.2e} at {fine_n} nodes per axis"
            )));
        }
        n = fine_n;
        coarse = fine;
    }
}

const IS_CHUNK: usize = 1 << 16;

/// Self-normalized importance sampling with `budget` proposal draws.
///
/// Draws are split into fixed chunks, each with its own substream of `rng`, so
/// the result does not depend on the thread count.
pub fn importance_sampling_oracle(
    t: &Target,
    proposal: &StudentTProposal,
    budget: usize,
    rng: &RngStream,
) -> Result<MomentOracle> {
    let d = t.dim();
    if proposal.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: proposal.dim() });
    }
    if budget == 0 {
        return Err(Error::InvalidParameter("importance sampling budget must be positive".into()));
    }
    let chunks = budget.div_ceil(IS_CHUNK);
    let parts: Vec<WeightedMoments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng.substream(rng.stream_id().wrapping_add(1 + c as u64));
            let mut acc = WeightedMoments::new(d);
            let mut z = vec![0.0; d];
            let count = IS_CHUNK.min(budget - c * IS_CHUNK);
            for _ in 0..count {
                let lq = proposal.sample_into(&mut r, &mut z);
                acc.add(t.log_density(&z) - lq, &z, false);
            }
            acc
        })
        .collect();
    let acc = parts.into_iter().fold(WeightedMoments::new(d), WeightedMoments::merge);
    let required = budget as f64 / 100.0;
    let ess = if acc.sw > 0.0 { acc.ess() } else { 0.0 };
    if !(ess >= required) {
        return Err(Error::LowEffectiveSampleSize { ess, required });
    }
    let (mean, cov) = acc.mean_cov();
    MomentOracle::new(mean, cov, MomentSource::LongRunImportanceSampling)
}

/// Seed for the importance-sampling fallback in [`moment_oracle`].
pub const ORACLE_SEED: u64 = 0x5eed_0ac1e;

/// Best available ground truth: analytic moments, then grid quadrature for
/// `dim <= 2`, then importance sampling with the target's reference proposal.
pub fn moment_oracle(t: &Target, budget: usize) -> Result<MomentOracle> {
    if let Some(m) = t.analytic_moments() {
        return Ok(m.clone());
    }
    if t.dim() <= 2 && t.bounds().is_some() {
        let g = grid_quadrature(t)?;
        return MomentOracle::new(g.mean, g.cov, MomentSource::GridQuadrature);
    }
    match t.reference() {
        Some(p) => importance_sampling_oracle(t, p, budget, &RngStream::new(ORACLE_SEED, 0)),
        None => Err(Error::InvalidParameter(format!(
            "target `{}` has neither a quadrature grid nor a reference proposal",
            t.name()
        ))),
    }
}

/// Moves an exact 0 off the boundary so the inverse CDF stays finite.
fn open_unit(u: f64) -> f64 {
    if u > 0.0 {
        u
    } else {
        f64::EPSILON * 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{builtin_target, TargetSpec};

    #[test]
    fn analytic_gaussian_oracle() {
        let spec =
            TargetSpec::Gaussian { mean: vec![1.0, 2.0], cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]], evidence: 1.0 };
        let m = moment_oracle(&builtin_target(&spec).unwrap(), 1).unwrap();
        assert_eq!(m.mean, vec![1.0, 2.0]);
        assert_eq!(m.cov, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.source, MomentSource::Analytic);
    }

    #[test]
    fn skewed_mixture_grid_matches_closed_form() {
        let t = builtin_target(&TargetSpec::SkewedMixture1d).unwrap();
        let m = moment_oracle(&t, 1).unwrap();
        assert_eq!(m.source, MomentSource::GridQuadrature);
        let (mean, var) = crate::targets::skewed_mixture_1d().moments();
        assert!((m.mean[0] - mean).abs() < 1e-8, "{} vs {mean}", m.mean[0]);
        assert!((m.cov[0] - var).abs() < 1e-8, "{} vs {var}", m.cov[0]);
    }

    #[test]
    fn grid_widens_when_mass_leaks() {
        let spec = TargetSpec::Gaussian { mean: vec![3.0], cov: vec![vec![1.0]], evidence: 1.0 };
        let t = builtin_target(&spec).unwrap().with_bounds(vec![(-1.0, 5.0)]);
        let g = grid_quadrature(&t).unwrap();
        assert!(g.bounds[0].0 < -1.0 && g.bounds[0].1 > 5.0);
        assert!(g.log_normalizer.abs() < 1e-6);
        assert!((g.mean[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn student_t_density_integrates_to_one() {
        let p = StudentTProposal::new(vec![0.5], vec![2.0], 5).unwrap();
        let (lo, hi, n) = (-400.0, 400.0, 400_001);
        let h = (hi - lo) / (n - 1) as f64;
        let total: f64 = (0..n).map(|i| p.log_pdf(&[lo + i as f64 * h]).exp()).sum::<f64>() * h;
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn student_t_sampler_reports_its_density() {
        let p = StudentTProposal::new(vec![0.5, -1.0], vec![2.0, 0.7], 5).unwrap();
        let mut rng = RngStream::new(3, 0);
        let mut z = [0.0; 2];
        for _ in 0..100 {
            let lq = p.sample_into(&mut rng, &mut z);
            assert!((lq - p.log_pdf(&z)).abs() < 1e-12);
        }
    }

    #[test]
    fn low_ess_is_reported() {
        let spec = TargetSpec::Gaussian { mean: vec![40.0], cov: vec![vec![0.01]], evidence: 1.0 };
        let t = builtin_target(&spec).unwrap();
        let p = StudentTProposal::new(vec![0.0], vec![1.0], 5).unwrap();
        let err = importance_sampling_oracle(&t, &p, 10_000, &RngStream::new(1, 0)).unwrap_err();
        assert!(matches!(err, Error::LowEffectiveSampleSize { .. }));
    }

    #[test]
    fn importance_sampling_is_thread_count_independent() {
        let t = builtin_target(&TargetSpec::SkewedMixture1d).unwrap();
        let p = t.reference().unwrap().clone();
        let rng = RngStream::new(9, 0);
        let a = importance_sampling_oracle(&t, &p, 200_000, &rng).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| importance_sampling_oracle(&t, &p, 200_000, &rng).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_indefinite_oracle() {
        assert!(MomentOracle::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0], MomentSource::Analytic).is_err());
    }
}
