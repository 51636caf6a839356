//! Laplace initialization: MAP by gradient ascent, covariance from the
//! inverse negative Hessian.

use crate::mappings::GaussianParams;
use crate::targets::families::cholesky;
use crate::targets::Target;
use crate::{Error, Result};

const MAX_STEPS: usize = 500;
const GRAD_TOL: f64 = 1e-8;
const MAX_REJECTS: usize = 50;
const FD_STEP: f64 = 1e-4;
const FALLBACK_SCALE: f64 = 0.1;

/// Outcome of [`laplace_fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceFit {
    pub theta: GaussianParams,
    pub map_point: Vec<f64>,
    pub log_density: f64,
    pub steps: usize,
    pub grad_norm: f64,
    /// Row-major finite-difference Hessian of `log p` at the MAP.
    pub hessian: Vec<f64>,
    /// Set when the Hessian was not negative definite and `C = 0.1 I` was used.
    pub fallback: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Starting point: the origin, else the centre of the reference proposal or
/// quadrature box.
fn start_point(target: &Target) -> Result<Vec<f64>> {
    let d = target.dim();
    let mut candidates = vec![vec![0.0; d]];
    if let Some(b) = target.bounds() {
        candidates.push(b.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect());
    }
    candidates
        .into_iter()
        .find(|z| target.log_density(z).is_finite())
        .ok_or_else(|| Error::MapDiverged("no finite starting point".into()))
}

/// Steepest ascent with Barzilai-Borwein steps and Armijo backtracking.
fn find_map(target: &Target) -> Result<(Vec<f64>, f64, usize, f64)> {
    let d = target.dim();
    let mut x = start_point(target)?;
    let mut g = vec![0.0; d];
    let mut f = target.log_density_grad(&x, &mut g);
    let mut step = 1.0 / norm(&g).max(1.0);
    let mut x_new = vec![0.0; d];
    let mut g_new = vec![0.0; d];
    let mut rejects = 0;
    let mut steps = 0;
    while steps < MAX_STEPS {
        let gn = norm(&g);
        if gn < GRAD_TOL {
            break;
        }
        for i in 0..d {
            x_new[i] = x[i] + step * g[i];
        }
        let f_new = target.log_density_grad(&x_new, &mut g_new);
        if !(f_new.is_finite() && f_new >= f + 1e-4 * step * gn * gn) {
            rejects += 1;
            if rejects >= MAX_REJECTS {
                return Err(Error::MapDiverged(format!("{MAX_REJECTS} consecutive rejected steps at log p = {f}")));
            }
            step *= 0.5;
            continue;
        }
        rejects = 0;
        steps += 1;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        step = if sy < 0.0 { dot(&s, &s) / -sy } else { 2.0 * step };
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
    }
    let gn = norm(&g);
    Ok((x, f, steps, gn))
}

/// Central differences of the gradient, symmetrized.
fn fd_hessian(target: &Target, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut h = vec![0.0; d * d];
    let mut xp = x.to_vec();
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    for j in 0..d {
        xp[j] = x[j] + FD_STEP;
        target.log_density_grad(&xp, &mut gp);
        xp[j] = x[j] - FD_STEP;
        target.log_density_grad(&xp, &mut gm);
        xp[j] = x[j];
        for i in 0..d {
            h[i * d + j] = (gp[i] - gm[i]) / (2.0 * FD_STEP);
        }
    }
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (h[i * d + j] + h[j * d + i]);
            h[i * d + j] = v;
            h[j * d + i] = v;
        }
    }
    h
}

/// Full Laplace fit with diagnostics.
pub fn laplace_fit(target: &Target) -> Result<LaplaceFit> {
    let d = target.dim();
    let (map_point, log_density, steps, grad_norm) = find_map(target)?;
    let hessian = fd_hessian(target, &map_point);
    let neg: Vec<f64> = hessian.iter().map(|v| -v).collect();
    let scale = cholesky(&neg, d).ok().and_then(|l| {
        // Sigma = (L L^T)^{-1}; its Cholesky factor comes from inverting via nalgebra.
        let l = nalgebra::DMatrix::from_row_slice(d, d, &l);
        let inv = l.try_inverse()?;
        let sigma = inv.transpose() * &inv;
        let flat: Vec<f64> = (0..d * d).map(|k| sigma[(k / d, k % d)]).collect();
        cholesky(&flat, d).ok()
    });
    let fallback = scale.is_none();
    let theta = match scale {
        Some(c) => GaussianParams::new(map_point.clone(), c)?,
        None => GaussianParams::isotropic(map_point.clone(), FALLBACK_SCALE),
    };
    Ok(LaplaceFit { theta, map_point, log_density, steps, grad_norm, hessian, fallback })
}

/// `N(MAP, (-H)^{-1})`, or `N(MAP, 0.01 I)` when the Hessian is not negative
/// definite.
pub fn laplace_init(target: &Target) -> Result<GaussianParams> {
    Ok(laplace_fit(target)?.theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{builtin_target, LogDensity, TargetSpec};
    use std::sync::Arc;

    #[test]
    fn exact_for_gaussians() {
        let spec =
            TargetSpec::Gaussian { mean: vec![1.0, -2.0], cov: vec![vec![2.0, 0.6], vec![0.6, 0.5]], evidence: 3.0 };
        let fit = laplace_fit(&builtin_target(&spec).unwrap()).unwrap();
        assert!(!fit.fallback);
        assert!((fit.map_point[0] - 1.0).abs() < 1e-5 && (fit.map_point[1] + 2.0).abs() < 1e-5);
        let cov = fit.theta.covariance();
        for (a, b) in cov.iter().zip([2.0, 0.6, 0.6, 0.5]) {
            assert!((a - b).abs() < 1e-5, "{cov:?}");
        }
    }

    #[test]
    fn skewed_mixture_map_matches_grid_argmax() {
        let t = builtin_target(&TargetSpec::SkewedMixture1d).unwrap();
        let fit = laplace_fit(&t).unwrap();
        let h = 20.0 / 100_000.0;
        let best = (0..=100_000)
            .map(|i| -10.0 + i as f64 * h)
            .max_by(|a, b| t.log_density(&[*a]).total_cmp(&t.log_density(&[*b])))
            .unwrap();
        assert!((fit.map_point[0] - best).abs() <= h, "{} vs {best}", fit.map_point[0]);
    }

    /// Flat on the unit box, quadratic decay outside it.
    #[derive(Debug)]
    struct FlatTop;

    impl LogDensity for FlatTop {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, z: &[f64]) -> f64 {
            -z.iter().map(|x| (x.abs() - 1.0).max(0.0).powi(2)).sum::<f64>()
        }
        fn log_density_grad(&self, z: &[f64], g: &mut [f64]) -> f64 {
            for (gi, x) in g.iter_mut().zip(z) {
                *gi = -2.0 * (x.abs() - 1.0).max(0.0) * x.signum();
            }
            self.log_density(z)
        }
    }

    #[test]
    fn flat_curvature_falls_back() {
        let t = Target::new("flat_top", Arc::new(FlatTop));
        let fit = laplace_fit(&t).unwrap();
        assert!(fit.fallback);
        assert_eq!(fit.theta.scale(), &[0.1, 0.0, 0.0, 0.1]);
    }

    #[test]
    fn funnel_mode() {
        let t = builtin_target(&TargetSpec::Funnel { dim: 2, scale: 1.0 }).unwrap();
        let fit = laplace_fit(&t).unwrap();
        assert!((fit.map_point[0] + 0.5).abs() < 1e-6, "{:?}", fit.map_point);
        assert!(fit.map_point[1].abs() < 1e-6);
    }
}
