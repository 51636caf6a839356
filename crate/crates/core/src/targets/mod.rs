//! Unnormalized targets `log p(z, x)` with gradients, and the ground-truth
//! posterior moments used to score approximations.

pub(crate) mod families;
mod oracle;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use families::{Funnel, GaussianDensity, LogisticRegression, NormalMixture1d};
pub use oracle::{
    grid_quadrature, importance_sampling_oracle, moment_oracle, GridSummary, MomentOracle, MomentSource,
    StudentTProposal,
};

/// An unnormalized log-density over `R^dim`. `x` is fixed inside the
/// implementation. Values may be `-inf` outside the support.
pub trait LogDensity: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn log_density(&self, z: &[f64]) -> f64;

    /// Writes `grad_z log p(z, x)` into `grad` and returns `log p(z, x)`.
    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64;
}

/// A named target with optional known normalizer and oracle hints.
///
/// Cheap to clone; the density is shared.
#[derive(Clone)]
pub struct Target {
    name: String,
    density: Arc<dyn LogDensity>,
    log_normalizer: Option<f64>,
    analytic: Option<MomentOracle>,
    bounds: Option<Vec<(f64, f64)>>,
    reference: Option<StudentTProposal>,
}

impl fmt::Debug for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Target")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("log_normalizer", &self.log_normalizer)
            .finish()
    }
}

impl Target {
    pub fn new(name: impl Into<String>, density: Arc<dyn LogDensity>) -> Self {
        Self { name: name.into(), density, log_normalizer: None, analytic: None, bounds: None, reference: None }
    }

    pub fn with_log_normalizer(mut self, log_px: f64) -> Self {
        self.log_normalizer = Some(log_px);
        self
    }

    pub fn with_moments(mut self, oracle: MomentOracle) -> Self {
        self.analytic = Some(oracle);
        self
    }

    /// Box used as the starting grid for quadrature.
    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    /// Proposal for long-run self-normalized importance sampling.
    pub fn with_reference(mut self, proposal: StudentTProposal) -> Self {
        self.reference = Some(proposal);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.density.dim()
    }

    pub fn log_normalizer(&self) -> Option<f64> {
        self.log_normalizer
    }

    pub fn analytic_moments(&self) -> Option<&MomentOracle> {
        self.analytic.as_ref()
    }

    pub fn bounds(&self) -> Option<&[(f64, f64)]> {
        self.bounds.as_deref()
    }

    pub fn reference(&self) -> Option<&StudentTProposal> {
        self.reference.as_ref()
    }

    #[inline]
    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.density.log_density(z)
    }

    #[inline]
    pub fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        self.density.log_density_grad(z, grad)
    }

    pub fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.density.log_density_grad(z, &mut g);
        g
    }
}

fn default_one() -> f64 {
    1.0
}

/// A built-in target family and its parameters, as written in experiment
/// configs (`{"name": "funnel", "dim": 2}`) or on the command line
/// (`funnel(2)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    StdGaussian {
        dim: usize,
    },
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
        #[serde(default = "default_one")]
        evidence: f64,
    },
    #[serde(rename = "skewed_mixture_1d")]
    SkewedMixture1d,
    Funnel {
        dim: usize,
        #[serde(default = "default_one")]
        scale: f64,
    },
    LogitRegSmall,
}

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

impl TargetSpec {
    /// Identifier used in result files.
    pub fn label(&self) -> String {
        match self {
            TargetSpec::StdGaussian { dim } => format!("std_gaussian({dim})"),
            TargetSpec::Gaussian { mean, cov, evidence } => {
                let mut s = if mean.len() == 1 {
                    format!("gaussian({},{}", fmt_num(mean[0]), fmt_num(cov[0][0]))
                } else {
                    format!("gaussian(d={}", mean.len())
                };
                if *evidence != 1.0 {
                    s.push_str(&format!(",evidence={}", fmt_num(*evidence)));
                }
                s.push(')');
                s
            }
            TargetSpec::SkewedMixture1d => "skewed_mixture_1d".into(),
            TargetSpec::Funnel { dim, scale } => {
                if *scale == 1.0 {
                    format!("funnel({dim})")
                } else {
                    format!("funnel({dim},{})", fmt_num(*scale))
                }
            }
            TargetSpec::LogitRegSmall => "logit_reg_small".into(),
        }
    }
}

impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for TargetSpec {
    type Err = Error;

    /// Parses `name` or `name(arg, ...)`. The string form of `gaussian` is
    /// one-dimensional: `gaussian(mean, var[, evidence])`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], &s[i + 1..s.len() - 1]),
            Some(_) => return Err(Error::UnknownTarget(s.into())),
            None => (s, ""),
        };
        let nums: Vec<f64> = if args.trim().is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| {
                    let a = a.trim();
                    let a = a.rsplit('=').next().unwrap_or(a);
                    a.parse::<f64>().map_err(|_| Error::InvalidParameter(format!("bad target argument `{a}` in `{s}`")))
                })
                .collect::<Result<_>>()?
        };
        let as_dim = |x: f64| -> Result<usize> {
            if x >= 1.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::InvalidParameter(format!("dimension must be a positive integer in `{s}`")))
            }
        };
        let arity = |lo: usize, hi: usize| -> Result<()> {
            if nums.len() < lo || nums.len() > hi {
                Err(Error::InvalidParameter(format!("`{name}` takes {lo} to {hi} arguments, got {}", nums.len())))
            } else {
                Ok(())
            }
        };
        match name {
            "std_gaussian" => {
                arity(0, 1)?;
                Ok(TargetSpec::StdGaussian { dim: nums.first().map(|&x| as_dim(x)).transpose()?.unwrap_or(1) })
            }
            "gaussian" => {
                arity(2, 3)?;
                Ok(TargetSpec::Gaussian {
                    mean: vec![nums[0]],
                    cov: vec![vec![nums[1]]],
                    evidence: nums.get(2).copied().unwrap_or(1.0),
                })
            }
            "skewed_mixture_1d" => {
                arity(0, 0)?;
                Ok(TargetSpec::SkewedMixture1d)
            }
            "funnel" => {
                arity(0, 2)?;
                Ok(TargetSpec::Funnel {
                    dim: nums.first().map(|&x| as_dim(x)).transpose()?.unwrap_or(2),
                    scale: nums.get(1).copied().unwrap_or(1.0),
                })
            }
            "logit_reg_small" => {
                arity(0, 0)?;
                Ok(TargetSpec::LogitRegSmall)
            }
            _ => Err(Error::UnknownTarget(name.into())),
        }
    }
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    (0..d).for_each(|i| m[i * d + i] = 1.0);
    m
}

/// The mixture standing in for the one-dimensional running example: an
/// asymmetric main lobe made of two overlapping normals and a minor mode on
/// the left. The weights sum to one, so `log p(x) = 0`.
pub fn skewed_mixture_1d() -> NormalMixture1d {
    NormalMixture1d::new(&[0.55, 0.25, 0.2], &[0.0, 0.9, -4.0], &[0.6, 1.1, 0.8]).expect("valid mixture")
}

/// Builds a named target.
pub fn builtin_target(spec: &TargetSpec) -> Result<Target> {
    let label = spec.label();
    match spec {
        TargetSpec::StdGaussian { dim } => {
            let d = *dim;
            if d == 0 {
                return Err(Error::InvalidParameter("dimension must be positive".into()));
            }
            gaussian_target(label, vec![0.0; d], identity(d), 1.0)
        }
        TargetSpec::Gaussian { mean, cov, evidence } => {
            let d = mean.len();
            if d == 0 {
                return Err(Error::InvalidParameter("empty mean".into()));
            }
            if cov.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: cov.len() });
            }
            if let Some(row) = cov.iter().find(|r| r.len() != d) {
                return Err(Error::DimensionMismatch { expected: d, got: row.len() });
            }
            let flat: Vec<f64> = cov.iter().flatten().copied().collect();
            gaussian_target(label, mean.clone(), flat, *evidence)
        }
        TargetSpec::SkewedMixture1d => Ok(Target::new(label, Arc::new(skewed_mixture_1d()))
            .with_log_normalizer(0.0)
            .with_bounds(vec![(-12.0, 12.0)])
            .with_reference(StudentTProposal::new(vec![-0.5], vec![3.0], 5)?)),
        TargetSpec::Funnel { dim, scale } => {
            let funnel = Funnel::new(*dim, *scale)?;
            let d = *dim;
            let s = *scale;
            let x_var = (0.5 * s * s).exp();
            let mut cov = vec![0.0; d * d];
            cov[0] = s * s;
            (1..d).for_each(|i| cov[i * d + i] = x_var);
            let mut bounds = vec![(-8.0 * s, 8.0 * s)];
            let x_half = 8.0 * (2.0 * s).exp();
            bounds.extend(std::iter::repeat_n((-x_half, x_half), d - 1));
            let mut sds = vec![1.2 * s];
            sds.extend(std::iter::repeat_n(1.5 * (0.25 * s * s).exp(), d - 1));
            Ok(Target::new(label, Arc::new(funnel))
                .with_log_normalizer(0.0)
                .with_moments(MomentOracle::new(vec![0.0; d], cov, MomentSource::Analytic)?)
                .with_bounds(bounds)
                .with_reference(StudentTProposal::new(vec![0.0; d], sds, 5)?))
        }
        TargetSpec::LogitRegSmall => Ok(Target::new(label, Arc::new(LogisticRegression::small()))
            .with_bounds(vec![(-10.0, 10.0), (-10.0, 10.0)])
            .with_reference(StudentTProposal::new(vec![0.0, 1.0], vec![1.5, 1.5], 5)?)),
    }
}

fn gaussian_target(label: String, mean: Vec<f64>, cov: Vec<f64>, evidence: f64) -> Result<Target> {
    if !(evidence > 0.0 && evidence.is_finite()) {
        return Err(Error::InvalidParameter(format!("evidence must be positive, got {evidence}")));
    }
    let d = mean.len();
    let log_evidence = evidence.ln();
    let density = GaussianDensity::new(mean.clone(), &cov, log_evidence)?;
    let bounds = (0..d)
        .map(|i| {
            let sd = cov[i * d + i].sqrt();
            (mean[i] - 10.0 * sd, mean[i] + 10.0 * sd)
        })
        .collect();
    let sds: Vec<f64> = (0..d).map(|i| 1.2 * cov[i * d + i].sqrt()).collect();
    Ok(Target::new(label, Arc::new(density))
        .with_log_normalizer(log_evidence)
        .with_moments(MomentOracle::new(mean.clone(), cov, MomentSource::Analytic)?)
        .with_bounds(bounds)
        .with_reference(StudentTProposal::new(mean, sds, 5)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube_sampling::RngStream;

    fn all_builtins() -> Vec<TargetSpec> {
        vec![
            TargetSpec::StdGaussian { dim: 1 },
            TargetSpec::StdGaussian { dim: 3 },
            TargetSpec::Gaussian { mean: vec![1.0, -2.0], cov: vec![vec![2.0, 0.6], vec![0.6, 0.5]], evidence: 3.0 },
            TargetSpec::SkewedMixture1d,
            TargetSpec::Funnel { dim: 2, scale: 1.0 },
            TargetSpec::Funnel { dim: 4, scale: 1.5 },
            TargetSpec::LogitRegSmall,
        ]
    }

    #[test]
    fn std_gaussian_mode_value() {
        let t = builtin_target(&TargetSpec::StdGaussian { dim: 1 }).unwrap();
        assert!((t.log_density(&[0.0]) + 0.918_938_533_204_672_8).abs() < 1e-15);
        assert_eq!(t.log_normalizer(), Some(0.0));
    }

    #[test]
    fn gaussian_evidence_one_is_normalized() {
        let t = builtin_target(&"gaussian(0,2,1)".parse().unwrap()).unwrap();
        assert_eq!(t.log_normalizer(), Some(0.0));
    }

    #[test]
    fn spec_parse_and_labels() {
        assert_eq!("funnel(2)".parse::<TargetSpec>().unwrap(), TargetSpec::Funnel { dim: 2, scale: 1.0 });
        assert_eq!("std_gaussian(3)".parse::<TargetSpec>().unwrap(), TargetSpec::StdGaussian { dim: 3 });
        assert_eq!("skewed_mixture_1d".parse::<TargetSpec>().unwrap(), TargetSpec::SkewedMixture1d);
        assert!(matches!("banana".parse::<TargetSpec>(), Err(Error::UnknownTarget(_))));
        assert!("funnel(1.5)".parse::<TargetSpec>().is_err());
        assert!("skewed_mixture_1d(3)".parse::<TargetSpec>().is_err());
        for spec in all_builtins() {
            if let TargetSpec::Gaussian { .. } = spec {
                continue;
            }
            assert_eq!(spec.label().parse::<TargetSpec>().unwrap(), spec);
        }
    }

    #[test]
    fn json_specs() {
        let s: TargetSpec = serde_json::from_str(r#"{"name": "funnel", "dim": 3}"#).unwrap();
        assert_eq!(s, TargetSpec::Funnel { dim: 3, scale: 1.0 });
        let s: TargetSpec = serde_json::from_str(r#"{"name": "skewed_mixture_1d"}"#).unwrap();
        assert_eq!(s, TargetSpec::SkewedMixture1d);
        assert!(serde_json::from_str::<TargetSpec>(r#"{"name": "nope"}"#).is_err());
    }

    #[test]
    fn invalid_parameters() {
        let bad =
            TargetSpec::Gaussian { mean: vec![0.0, 0.0], cov: vec![vec![1.0, 2.0], vec![2.0, 1.0]], evidence: 1.0 };
        assert!(matches!(builtin_target(&bad), Err(Error::NotPositiveDefinite(_))));
        let mismatch = TargetSpec::Gaussian { mean: vec![0.0, 0.0], cov: vec![vec![1.0]], evidence: 1.0 };
        assert!(matches!(builtin_target(&mismatch), Err(Error::DimensionMismatch { .. })));
        let no_ev = TargetSpec::Gaussian { mean: vec![0.0], cov: vec![vec![1.0]], evidence: 0.0 };
        assert!(builtin_target(&no_ev).is_err());
    }

    fn fd_gradient(t: &Target, z: &[f64], h: f64) -> Vec<f64> {
        let mut zp = z.to_vec();
        (0..z.len())
            .map(|i| {
                zp[i] = z[i] + h;
                let up = t.log_density(&zp);
                zp[i] = z[i] - h;
                let dn = t.log_density(&zp);
                zp[i] = z[i];
                (up - dn) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = RngStream::new(12, 0);
        for spec in all_builtins() {
            let t = builtin_target(&spec).unwrap();
            let d = t.dim();
            let mut g = vec![0.0; d];
            for _ in 0..100 {
                let z: Vec<f64> = (0..d).map(|_| 4.0 * rng.uniform() - 2.0).collect();
                let lp = t.log_density_grad(&z, &mut g);
                assert_eq!(lp, t.log_density(&z), "{}", t.name());
                let fd = fd_gradient(&t, &z, 1e-5);
                for i in 0..d {
                    let err = (g[i] - fd[i]).abs() / (1.0 + g[i].abs());
                    assert!(err <= 1e-5, "{} component {i}: {} vs {}", t.name(), g[i], fd[i]);
                }
            }
        }
    }

    fn trapezoid_1d(t: &Target, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / (n - 1) as f64;
        (0..n)
            .map(|i| {
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                w * t.log_density(&[lo + i as f64 * h]).exp()
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn skewed_mixture_normalizes() {
        let t = builtin_target(&TargetSpec::SkewedMixture1d).unwrap();
        let z = trapezoid_1d(&t, -10.0, 10.0, 100_000);
        assert!((z - 1.0).abs() < 1e-6, "{z}");
    }

    #[test]
    fn skewed_mixture_is_asymmetric_with_minor_left_mode() {
        let t = builtin_target(&TargetSpec::SkewedMixture1d).unwrap();
        // Main lobe peaks right of zero and decays slower on the right.
        let at = |z: f64| t.log_density(&[z]);
        assert!(at(1.0) > at(-1.0));
        // Local maximum near -4 separated by a trough.
        assert!(at(-4.0) > at(-2.8));
        assert!(at(-4.0) > at(-5.0));
        assert!(at(0.1) > at(-4.0));
    }

    #[test]
    fn normalized_targets_integrate_to_one_in_two_dimensions() {
        for spec in [
            TargetSpec::StdGaussian { dim: 2 },
            TargetSpec::Funnel { dim: 2, scale: 1.0 },
            TargetSpec::Gaussian { mean: vec![1.0, -2.0], cov: vec![vec![2.0, 0.6], vec![0.6, 0.5]], evidence: 1.0 },
        ] {
            let t = builtin_target(&spec).unwrap();
            let g = grid_quadrature(&t).unwrap();
            assert!(g.log_normalizer.abs() < 1e-3, "{}: {}", t.name(), g.log_normalizer);
        }
    }
}
