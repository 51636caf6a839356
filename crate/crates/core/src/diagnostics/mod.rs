//! Posterior-quality diagnostics: the bound's gap, a histogram estimate of
//! `KL[Q(z) || p(z | x)]`, moment errors against an oracle and the sweep-level
//! correlation between bound and accuracy improvements.

pub mod stats;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube_sampling::{Method, RngStream};
use crate::estimator::{EstimatorCouplingPair, PairScratch};
use crate::mappings::MapKind;
use crate::objective::{elbo_with_se, SampleBank};
use crate::targets::{MomentOracle, Target};
use crate::{Error, Result};

pub const DEFAULT_KL_DRAWS: usize = 1_000_000;
const DRAW_CHUNK: usize = 4096;
const MIN_COVERAGE: f64 = 0.999;
const MIN_BIN_DENSITY: f64 = 1e-12;

/// A rectangular histogram grid in one or two dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: Vec<usize>,
}

impl KlGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, bins: Vec<usize>) -> Result<Self> {
        let d = lo.len();
        if d == 0 || d > 2 || hi.len() != d || bins.len() != d {
            return Err(Error::InvalidParameter("histogram grids are one- or two-dimensional".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) || bins.contains(&0) {
            return Err(Error::InvalidParameter("empty histogram grid".into()));
        }
        Ok(Self { lo, hi, bins })
    }

    /// The oracle mean plus or minus eight standard deviations per axis, with
    /// 400 bins in 1D and 100 per axis in 2D.
    pub fn around(oracle: &MomentOracle) -> Result<Self> {
        let d = oracle.dim();
        let sd: Vec<f64> = oracle.variances().iter().map(|v| v.sqrt()).collect();
        let lo = (0..d).map(|i| oracle.mean[i] - 8.0 * sd[i]).collect();
        let hi = (0..d).map(|i| oracle.mean[i] + 8.0 * sd[i]).collect();
        Self::new(lo, hi, vec![if d == 1 { 400 } else { 100 }; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn n_bins(&self) -> usize {
        self.bins.iter().product()
    }

    fn width(&self, k: usize) -> f64 {
        (self.hi[k] - self.lo[k]) / self.bins[k] as f64
    }

    /// Flat bin index of `z`, or `None` outside the grid.
    pub fn locate(&self, z: &[f64]) -> Option<usize> {
        let mut idx = 0;
        for k in 0..self.dim() {
            let t = (z[k] - self.lo[k]) / self.width(k);
            if !(t >= 0.0 && t < self.bins[k] as f64) {
                return None;
            }
            idx = idx * self.bins[k] + t as usize;
        }
        Some(idx)
    }

    /// Posterior mass per bin by composite Simpson on each bin.
    pub fn posterior_masses(&self, target: &Target, log_px: f64) -> Vec<f64> {
        let sub = if self.dim() == 1 { 16 } else { 8 };
        let simpson = |i: usize| -> f64 {
            if i == 0 || i == sub {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            }
        };
        (0..self.n_bins())
            .into_par_iter()
            .map(|flat| {
                let mut idx = [0usize; 2];
                let mut rest = flat;
                for k in (0..self.dim()).rev() {
                    idx[k] = rest % self.bins[k];
                    rest /= self.bins[k];
                }
                let h: Vec<f64> = (0..self.dim()).map(|k| self.width(k) / sub as f64).collect();
                let origin: Vec<f64> = (0..self.dim()).map(|k| self.lo[k] + idx[k] as f64 * self.width(k)).collect();
                let mut z = vec![0.0; self.dim()];
                let mut total = 0.0;
                if self.dim() == 1 {
                    for i in 0..=sub {
                        z[0] = origin[0] + i as f64 * h[0];
                        total += simpson(i) * (target.log_density(&z) - log_px).exp();
                    }
                    total * h[0] / 3.0
                } else {
                    for i in 0..=sub {
                        for j in 0..=sub {
                            z[0] = origin[0] + i as f64 * h[0];
                            z[1] = origin[1] + j as f64 * h[1];
                            total += simpson(i) * simpson(j) * (target.log_density(&z) - log_px).exp();
                        }
                    }
                    total * h[0] * h[1] / 9.0
                }
            })
            .collect()
    }
}

/// Runs `step` on `n` coupled posterior samples drawn in fixed chunks, each
/// chunk on stream `rng.stream_id() + chunk`. Degenerate batches are redrawn
/// and counted.
fn for_each_coupled<S: Send>(
    pair: &EstimatorCouplingPair,
    n: usize,
    rng: &RngStream,
    init: impl Fn() -> S + Sync,
    step: impl Fn(&mut S, &[f64]) + Sync,
) -> Result<(Vec<S>, usize)> {
    let chunks = n.div_ceil(DRAW_CHUNK);
    let parts: Vec<(S, usize, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng.substream(rng.stream_id().wrapping_add(c as u64));
            let mut state = init();
            let mut scratch = PairScratch::default();
            let mut z = vec![0.0; pair.dim()];
            let want = DRAW_CHUNK.min(n - c * DRAW_CHUNK);
            let (mut got, mut degenerate) = (0, 0);
            while got < want {
                match pair.sample_posterior_into(&mut r, &mut scratch, &mut z) {
                    Ok(()) => {
                        step(&mut state, &z);
                        got += 1;
                    }
                    Err(_) => {
                        degenerate += 1;
                        if degenerate > want {
                            break;
                        }
                    }
                }
            }
            (state, got, degenerate)
        })
        .collect();
    let attempts: usize = parts.iter().map(|p| p.1 + p.2).sum();
    let degenerate: usize = parts.iter().map(|p| p.2).sum();
    if 2 * degenerate > attempts {
        return Err(Error::TooManyDegenerate { degenerate, total: attempts });
    }
    Ok((parts.into_iter().map(|p| p.0).collect(), degenerate))
}

/// `n` coupled posterior samples (row-major) and the number of degenerate
/// batches that were redrawn.
pub fn coupled_samples(pair: &EstimatorCouplingPair, n: usize, rng: &RngStream) -> Result<(Vec<f64>, usize)> {
    let (parts, degenerate) = for_each_coupled(pair, n, rng, Vec::new, |v: &mut Vec<f64>, z| v.extend_from_slice(z))?;
    Ok((parts.concat(), degenerate))
}

/// Histogram estimate of `KL[Q || p]` from bin probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub kl: f64,
    pub se: f64,
    /// Posterior mass inside the grid.
    pub coverage: f64,
    /// Share of the samples that fell in bins where the posterior is resolved.
    pub q_mass_used: f64,
}

/// `sum_b Q_b log(Q_b / P_b)` over bins with `P_b >= 1e-12`, with a
/// delta-method standard error for multinomial counts.
pub fn histogram_kl(counts: &[u64], n: usize, p: &[f64]) -> Result<KlEstimate> {
    let coverage: f64 = p.iter().sum();
    if coverage < MIN_COVERAGE {
        return Err(Error::GridCoverage { coverage });
    }
    let n_f = n as f64;
    let (mut kl, mut m1, mut m2, mut used) = (0.0, 0.0, 0.0, 0.0);
    for (&c, &pb) in counts.iter().zip(p) {
        if pb < MIN_BIN_DENSITY || c == 0 {
            continue;
        }
        let q = c as f64 / n_f;
        let l = (q / pb).ln();
        kl += q * l;
        m1 += q * (l + 1.0);
        m2 += q * (l + 1.0) * (l + 1.0);
        used += q;
    }
    let se = ((m2 - m1 * m1).max(0.0) / n_f).sqrt();
    Ok(KlEstimate { kl, se, coverage, q_mass_used: used })
}

/// Binned `Q(z)` from `draws` coupled samples.
pub fn coupled_histogram(
    pair: &EstimatorCouplingPair,
    grid: &KlGrid,
    draws: usize,
    rng: &RngStream,
) -> Result<Vec<u64>> {
    let nb = grid.n_bins();
    let (parts, _) = for_each_coupled(
        pair,
        draws,
        rng,
        || vec![0u64; nb],
        |h: &mut Vec<u64>, z| {
            if let Some(b) = grid.locate(z) {
                h[b] += 1;
            }
        },
    )?;
    let mut counts = vec![0u64; nb];
    for h in parts {
        counts.iter_mut().zip(h).for_each(|(a, b)| *a += b);
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub elbo_hat: f64,
    pub elbo_se: f64,
    pub log_px: f64,
    pub gap: f64,
    pub kl_z_hat: Option<f64>,
    pub kl_z_se: Option<f64>,
    pub coverage: Option<f64>,
}

impl GapReport {
    /// `gap >= -3 se`.
    pub fn jensen_holds(&self) -> bool {
        self.gap >= -3.0 * self.elbo_se
    }

    /// `kl_z <= gap + 3 (se_elbo + se_kl)`; vacuously true without a KL estimate.
    pub fn divergence_bound_holds(&self) -> bool {
        match (self.kl_z_hat, self.kl_z_se) {
            (Some(kl), Some(se)) => kl <= self.gap + 3.0 * (self.elbo_se + se),
            _ => true,
        }
    }
}

/// The bound's gap on a fresh bank and, for `dim <= 2` when a grid is given,
/// the histogram divergence of the coupled posterior from `draws` samples.
pub fn gap_report(
    pair: &EstimatorCouplingPair,
    target: &Target,
    eval_bank: &SampleBank,
    grid: Option<&KlGrid>,
    draws: usize,
    rng: &RngStream,
) -> Result<GapReport> {
    let log_px = target
        .log_normalizer()
        .ok_or_else(|| Error::InvalidParameter(format!("target `{}` has no known log p(x)", target.name())))?;
    let (elbo_hat, elbo_se) = elbo_with_se(pair.theta(), eval_bank, target)?;
    let mut report =
        GapReport { elbo_hat, elbo_se, log_px, gap: log_px - elbo_hat, kl_z_hat: None, kl_z_se: None, coverage: None };
    if let Some(grid) = grid.filter(|_| target.dim() <= 2) {
        if grid.dim() != target.dim() {
            return Err(Error::DimensionMismatch { expected: target.dim(), got: grid.dim() });
        }
        let p = grid.posterior_masses(target, log_px);
        let coverage: f64 = p.iter().sum();
        if coverage < MIN_COVERAGE {
            return Err(Error::GridCoverage { coverage });
        }
        let counts = coupled_histogram(pair, grid, draws, rng)?;
        let est = histogram_kl(&counts, draws, &p)?;
        report.kl_z_hat = Some(est.kl);
        report.kl_z_se = Some(est.se);
        report.coverage = Some(est.coverage);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentError {
    /// `|mean_hat - mean|^2`.
    pub mean_err: f64,
    /// `|cov_hat - cov|_F^2`.
    pub cov_err: f64,
    pub n_samples: usize,
    pub degenerate: usize,
}

/// Sample mean and covariance (row-major) of row-major samples.
pub fn sample_moments(samples: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() / d;
    let mut mean = vec![0.0; d];
    for z in samples.chunks_exact(d) {
        mean.iter_mut().zip(z).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for z in samples.chunks_exact(d) {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (z[i] - mean[i]) * (z[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    (mean, cov)
}

pub fn moment_error_from_samples(samples: &[f64], d: usize, oracle: &MomentOracle) -> MomentError {
    let (mean, cov) = sample_moments(samples, d);
    MomentError {
        mean_err: mean.iter().zip(&oracle.mean).map(|(a, b)| (a - b) * (a - b)).sum(),
        cov_err: cov.iter().zip(&oracle.cov).map(|(a, b)| (a - b) * (a - b)).sum(),
        n_samples: samples.len() / d,
        degenerate: 0,
    }
}

/// Squared errors of the moments of `n` coupled samples against the oracle.
pub fn moment_error(
    pair: &EstimatorCouplingPair,
    oracle: &MomentOracle,
    n: usize,
    rng: &RngStream,
) -> Result<MomentError> {
    if n < 100 {
        return Err(Error::InvalidParameter(format!("moment_error needs at least 100 samples, got {n}")));
    }
    if oracle.dim() != pair.dim() {
        return Err(Error::DimensionMismatch { expected: pair.dim(), got: oracle.dim() });
    }
    let (samples, degenerate) = coupled_samples(pair, n, rng)?;
    Ok(MomentError { degenerate, ..moment_error_from_samples(&samples, pair.dim(), oracle) })
}

/// One grid cell of an experiment sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub target: String,
    pub method: Method,
    pub map: MapKind,
    pub m: usize,
    pub seed: u64,
    pub final_elbo: Option<f64>,
    pub elbo_se: Option<f64>,
    pub gap: Option<f64>,
    pub kl_z: Option<f64>,
    pub kl_z_se: Option<f64>,
    pub mean_err: Option<f64>,
    pub cov_err: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub wall_time_ms: u64,
}

impl SweepRecord {
    fn usable(&self) -> Option<(f64, f64)> {
        match (self.final_elbo, self.cov_err, &self.error) {
            (Some(e), Some(c), None) if e.is_finite() && c > 0.0 && c.is_finite() => Some((e, c)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCorrelation {
    /// Pearson correlation over every paired record.
    pub unfiltered: f64,
    /// Same, keeping only records that improve on both axes.
    pub filtered: f64,
    pub n_records: usize,
    pub n_filtered: usize,
    /// Why a correlation is NaN, if it is.
    pub reason: Option<String>,
    /// `(delta_elbo, delta_log_err)` pairs in record order.
    pub points: Vec<(f64, f64)>,
}

/// Improvement pairs against the `iid` baseline: `delta_elbo = elbo - elbo_iid`
/// and `delta_log_err = log cov_err_iid - log cov_err`.
///
/// The baseline of a record is the `iid` record with the same target, map,
/// seed and `M`, or `iid` with `M = 1` when no such record exists.
pub fn improvement_pairs(records: &[SweepRecord]) -> Vec<(f64, f64)> {
    let mut baseline: HashMap<(&str, MapKind, u64, usize), (f64, f64)> = HashMap::new();
    for r in records.iter().filter(|r| r.method == Method::Iid) {
        if let Some(v) = r.usable() {
            baseline.insert((r.target.as_str(), r.map, r.seed, r.m), v);
        }
    }
    records
        .iter()
        .filter(|r| r.method != Method::Iid)
        .filter_map(|r| {
            let (elbo, err) = r.usable()?;
            let key = (r.target.as_str(), r.map, r.seed, r.m);
            let (b_elbo, b_err) = baseline.get(&key).or_else(|| baseline.get(&(key.0, key.1, key.2, 1)))?;
            Some((elbo - b_elbo, b_err.ln() - err.ln()))
        })
        .collect()
}

/// Correlation between bound improvements and accuracy improvements.
pub fn sweep_correlation(records: &[SweepRecord]) -> Result<SweepCorrelation> {
    let points = improvement_pairs(records);
    if points.len() < 5 {
        return Err(Error::TooFewRecords { have: points.len(), need: 5 });
    }
    let corr = |pts: &[(f64, f64)]| -> (f64, Option<String>) {
        if pts.len() < 2 {
            return (f64::NAN, Some(format!("{} records", pts.len())));
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
        let r = stats::pearson(&x, &y);
        let reason = r.is_nan().then(|| "zero variance in the improvements".to_string());
        (r, reason)
    };
    let kept: Vec<(f64, f64)> = points.iter().copied().filter(|(a, b)| *a > 0.0 && *b > 0.0).collect();
    let (unfiltered, reason) = corr(&points);
    let (filtered, reason_f) = corr(&kept);
    Ok(SweepCorrelation {
        unfiltered,
        filtered,
        n_records: points.len(),
        n_filtered: kept.len(),
        reason: reason.or(reason_f.map(|r| format!("filtered: {r}"))),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: Method, m: usize, elbo: f64, err: f64) -> SweepRecord {
        SweepRecord {
            target: "t".into(),
            method,
            map: MapKind::Cartesian,
            m,
            seed: 0,
            final_elbo: Some(elbo),
            elbo_se: Some(0.0),
            gap: None,
            kl_z: None,
            kl_z_se: None,
            mean_err: Some(0.0),
            cov_err: Some(err),
            iterations: None,
            converged: None,
            error: None,
            wall_time_ms: 0,
        }
    }

    #[test]
    fn perfect_correlation() {
        let mut recs = vec![record(Method::Iid, 1, 0.0, 1.0)];
        for (i, m) in [Method::Anti, Method::Strat, Method::Qmc, Method::Lhs, Method::AntiStrat].iter().enumerate() {
            let d = 0.1 * (i + 1) as f64;
            recs.push(record(*m, 2, d, (-d).exp()));
        }
        let c = sweep_correlation(&recs).unwrap();
        assert!((c.unfiltered - 1.0).abs() < 1e-12);
        assert_eq!(c.n_records, 5);
    }

    #[test]
    fn identical_records_give_nan_with_reason() {
        let mut recs = vec![record(Method::Iid, 1, 0.0, 1.0)];
        recs.extend((0..5).map(|_| record(Method::Anti, 2, 0.0, 1.0)));
        let c = sweep_correlation(&recs).unwrap();
        assert!(c.unfiltered.is_nan());
        assert!(c.reason.is_some());
    }

    #[test]
    fn too_few_records() {
        let recs = vec![record(Method::Iid, 1, 0.0, 1.0), record(Method::Anti, 2, 0.1, 0.5)];
        assert!(matches!(sweep_correlation(&recs), Err(Error::TooFewRecords { have: 1, need: 5 })));
    }

    #[test]
    fn same_m_baseline_preferred() {
        let recs = vec![
            record(Method::Iid, 1, 0.0, 1.0),
            record(Method::Iid, 4, 0.5, 0.5),
            record(Method::Anti, 4, 0.7, 0.25),
            record(Method::Strat, 2, 0.2, 0.5),
        ];
        let pts = improvement_pairs(&recs);
        assert!((pts[0].0 - 0.2).abs() < 1e-12 && (pts[0].1 - 2f64.ln()).abs() < 1e-12);
        assert!((pts[1].0 - 0.2).abs() < 1e-12 && (pts[1].1 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn histogram_kl_of_matching_distributions_is_zero() {
        let p = [0.25, 0.5, 0.25];
        let est = histogram_kl(&[25, 50, 25], 100, &p).unwrap();
        assert!(est.kl.abs() < 1e-15);
        assert!(histogram_kl(&[1, 1, 1], 3, &[0.1, 0.1, 0.1]).is_err());
        let est = histogram_kl(&[50, 50, 0], 100, &p).unwrap();
        assert!((est.kl - (0.5 * 2f64.ln() + 0.5 * 1f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn grid_location() {
        let g = KlGrid::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![2, 4]).unwrap();
        assert_eq!(g.locate(&[0.75, 0.6]), Some(5));
        assert_eq!(g.locate(&[1.0, 0.6]), None);
        assert_eq!(g.locate(&[-0.1, 0.6]), None);
    }
}
