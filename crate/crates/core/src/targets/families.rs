//! Built-in unnormalized densities.

use std::f64::consts::PI;

use super::LogDensity;
use crate::{logsumexp, Error, Result};

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

/// Lower Cholesky factor of a symmetric positive-definite matrix (row-major).
pub(crate) fn cholesky(matrix: &[f64], d: usize) -> Result<Vec<f64>> {
    let m = nalgebra::DMatrix::from_row_slice(d, d, matrix);
    let sym_err = (&m - m.transpose()).abs().max();
    if sym_err > 1e-10 * m.abs().max().max(1.0) {
        return Err(Error::NotPositiveDefinite("matrix is not symmetric".into()));
    }
    let chol =
        nalgebra::Cholesky::new(m).ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    let l = chol.l();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            out[i * d + j] = l[(i, j)];
        }
    }
    Ok(out)
}

/// `N(mean, L L^T)` scaled by an evidence constant.
#[derive(Clone, Debug)]
pub struct GaussianDensity {
    mean: Vec<f64>,
    chol: Vec<f64>,
    log_det: f64,
    log_evidence: f64,
}

impl GaussianDensity {
    pub fn new(mean: Vec<f64>, cov: &[f64], log_evidence: f64) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, got: cov.len() });
        }
        let chol = cholesky(cov, d)?;
        let log_det = (0..d).map(|i| chol[i * d + i].ln()).sum();
        Ok(Self { mean, chol, log_det, log_evidence })
    }

    fn standardize(&self, z: &[f64], u: &mut [f64]) {
        let d = self.mean.len();
        for i in 0..d {
            let mut acc = z[i] - self.mean[i];
            for j in 0..i {
                acc -= self.chol[i * d + j] * u[j];
            }
            u[i] = acc / self.chol[i * d + i];
        }
    }
}

impl LogDensity for GaussianDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut buf = [0.0; 8];
        let mut heap;
        let u: &mut [f64] = if d <= 8 {
            &mut buf[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        self.standardize(z, u);
        let q: f64 = u.iter().map(|x| x * x).sum();
        self.log_evidence - d as f64 * HALF_LN_TAU - self.log_det - 0.5 * q
    }

    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.mean.len();
        let mut buf = [0.0; 8];
        let mut heap;
        let u: &mut [f64] = if d <= 8 {
            &mut buf[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        self.standardize(z, u);
        // grad = -L^{-T} u by back substitution.
        for i in (0..d).rev() {
            let mut acc = u[i];
            for k in i + 1..d {
                acc -= self.chol[k * d + i] * grad[k];
            }
            grad[i] = acc / self.chol[i * d + i];
        }
        grad.iter_mut().for_each(|g| *g = -*g);
        let q: f64 = u.iter().map(|x| x * x).sum();
        self.log_evidence - d as f64 * HALF_LN_TAU - self.log_det - 0.5 * q
    }
}

/// A weighted sum of one-dimensional normals.
#[derive(Clone, Debug)]
pub struct NormalMixture1d {
    log_weights: Vec<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl NormalMixture1d {
    pub fn new(weights: &[f64], means: &[f64], sds: &[f64]) -> Result<Self> {
        if weights.len() != means.len() || means.len() != sds.len() || weights.is_empty() {
            return Err(Error::InvalidParameter("mixture component lists differ in length".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || sds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter("mixture weights and scales must be positive".into()));
        }
        Ok(Self { log_weights: weights.iter().map(|w| w.ln()).collect(), means: means.to_vec(), sds: sds.to_vec() })
    }

    /// Mixture mean and variance in closed form.
    pub fn moments(&self) -> (f64, f64) {
        let w: Vec<f64> = self.log_weights.iter().map(|l| l.exp()).collect();
        let total: f64 = w.iter().sum();
        let mean = w.iter().zip(&self.means).map(|(w, m)| w * m).sum::<f64>() / total;
        let second =
            w.iter().zip(self.means.iter().zip(&self.sds)).map(|(w, (m, s))| w * (s * s + m * m)).sum::<f64>() / total;
        (mean, second - mean * mean)
    }

    fn component_logs(&self, z: f64, out: &mut [f64; 8]) -> usize {
        let k = self.means.len();
        for i in 0..k {
            let t = (z - self.means[i]) / self.sds[i];
            out[i] = self.log_weights[i] - HALF_LN_TAU - self.sds[i].ln() - 0.5 * t * t;
        }
        k
    }
}

impl LogDensity for NormalMixture1d {
    fn dim(&self) -> usize {
        1
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let mut buf = [0.0; 8];
        let k = self.component_logs(z[0], &mut buf);
        logsumexp(&buf[..k])
    }

    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let mut buf = [0.0; 8];
        let k = self.component_logs(z[0], &mut buf);
        let lse = logsumexp(&buf[..k]);
        grad[0] = (0..k).map(|i| (buf[i] - lse).exp() * -(z[0] - self.means[i]) / (self.sds[i] * self.sds[i])).sum();
        lse
    }
}

/// Neal's funnel: `v ~ N(0, scale^2)`, `x_i | v ~ N(0, e^v)`, with `z = (v, x)`.
#[derive(Clone, Debug)]
pub struct Funnel {
    dim: usize,
    scale: f64,
}

impl Funnel {
    pub fn new(dim: usize, scale: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidParameter("funnel needs dimension at least 2".into()));
        }
        if !(scale > 0.0) {
            return Err(Error::InvalidParameter("funnel scale must be positive".into()));
        }
        Ok(Self { dim, scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl LogDensity for Funnel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let v = z[0];
        let s2 = self.scale * self.scale;
        let k = (self.dim - 1) as f64;
        let sq: f64 = z[1..].iter().map(|x| x * x).sum();
        -0.5 * v * v / s2 - HALF_LN_TAU - self.scale.ln() - k * HALF_LN_TAU - 0.5 * k * v - 0.5 * sq * (-v).exp()
    }

    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let v = z[0];
        let s2 = self.scale * self.scale;
        let k = (self.dim - 1) as f64;
        let ev = (-v).exp();
        let sq: f64 = z[1..].iter().map(|x| x * x).sum();
        grad[0] = -v / s2 - 0.5 * k + 0.5 * sq * ev;
        for (g, x) in grad[1..].iter_mut().zip(&z[1..]) {
            *g = -x * ev;
        }
        self.log_density(z)
    }
}

/// Bayesian logistic regression with an isotropic normal prior.
#[derive(Clone, Debug)]
pub struct LogisticRegression {
    /// Row-major design matrix, `n x dim`.
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
    prior_sd: f64,
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl LogisticRegression {
    pub fn new(features: Vec<f64>, labels: Vec<f64>, dim: usize, prior_sd: f64) -> Result<Self> {
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch { expected: labels.len() * dim, got: features.len() });
        }
        Ok(Self { features, labels, dim, prior_sd })
    }

    /// A fixed two-parameter (intercept, slope) problem on twelve points with
    /// classes that overlap, so the posterior is proper and visibly skewed.
    pub fn small() -> Self {
        let xs = [-2.0, -1.6, -1.1, -0.7, -0.4, -0.1, 0.2, 0.5, 0.9, 1.2, 1.6, 2.1];
        let ys = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let features = xs.iter().flat_map(|&x| [1.0, x]).collect();
        Self::new(features, ys.to_vec(), 2, 2.5).expect("consistent data")
    }

    fn prior_log_norm(&self) -> f64 {
        -(self.dim as f64) * (HALF_LN_TAU + self.prior_sd.ln())
    }
}

impl LogDensity for LogisticRegression {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let mut ll = 0.0;
        for (row, &y) in self.features.chunks_exact(self.dim).zip(&self.labels) {
            let eta: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            ll += y * eta - log1p_exp(eta);
        }
        let s2 = self.prior_sd * self.prior_sd;
        ll + self.prior_log_norm() - 0.5 * z.iter().map(|b| b * b).sum::<f64>() / s2
    }

    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let s2 = self.prior_sd * self.prior_sd;
        for (g, b) in grad.iter_mut().zip(z) {
            *g = -b / s2;
        }
        let mut ll = 0.0;
        for (row, &y) in self.features.chunks_exact(self.dim).zip(&self.labels) {
            let eta: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            ll += y * eta - log1p_exp(eta);
            let p = 1.0 / (1.0 + (-eta).exp());
            for (g, a) in grad.iter_mut().zip(row) {
                *g += (y - p) * a;
            }
        }
        ll + self.prior_log_norm() - 0.5 * z.iter().map(|b| b * b).sum::<f64>() / s2
    }
}

/// `log Gamma` ratio used by the Student-t proposal.
pub(crate) fn student_t_log_norm(dof: f64, d: usize) -> f64 {
    let k = d as f64;
    libm::lgamma(0.5 * (dof + k)) - libm::lgamma(0.5 * dof) - 0.5 * k * (dof * PI).ln()
}
