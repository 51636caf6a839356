//! The empirical objective `E_bank log R` over a fixed bank of batches, its
//! exact reparameterization gradient, Laplace initialization and optimizers.

mod laplace;
mod optim;

use rayon::prelude::*;

use crate::cube_sampling::{BatchDesign, DesignScratch, Method, RngStream, WeightedCubeBatch};
use crate::mappings::{CubeMap, GaussianParams, MapKind};
use crate::targets::Target;
use crate::{pairwise_sum, Error, Result};

pub use laplace::{laplace_fit, laplace_init, LaplaceFit};
pub use optim::{optimize, OptResult, OptimizerConfig, OptimizerKind};

/// Batches per parallel work unit. Fixed so results do not depend on the
/// number of threads.
pub const CHUNK: usize = 256;

/// A fixed bank of `N` cube batches, stored with their standard-normal images
/// so every objective evaluation reuses them exactly.
#[derive(Clone, Debug)]
pub struct SampleBank {
    design: BatchDesign,
    map: CubeMap,
    n: usize,
    /// `N x L x cube_dim` cube points.
    omega: Vec<f64>,
    /// `N x L x dim` points `u = F^{-1}(omega)`.
    u: Vec<f64>,
    /// `N x L` log batch weights.
    log_w: Vec<f64>,
}

impl SampleBank {
    /// Draws `n` batches. Chunk `c` of [`CHUNK`] batches uses stream
    /// `rng.stream_id() + c`, so the bank depends only on `rng` and `n`.
    pub fn draw(design: &BatchDesign, map: &CubeMap, n: usize, rng: &RngStream) -> Result<Self> {
        if design.dim() != map.cube_dim() {
            return Err(Error::DimensionMismatch { expected: map.cube_dim(), got: design.dim() });
        }
        if n == 0 {
            return Err(Error::InvalidParameter("bank size must be positive".into()));
        }
        let len = design.batch_len();
        let (c, d) = (map.cube_dim(), map.dim());
        let mut omega = vec![0.0; n * len * c];
        let mut u = vec![0.0; n * len * d];
        let mut log_w = vec![0.0; n * len];
        omega
            .par_chunks_mut(CHUNK * len * c)
            .zip(u.par_chunks_mut(CHUNK * len * d))
            .zip(log_w.par_chunks_mut(CHUNK * len))
            .enumerate()
            .for_each(|(chunk, ((om, uu), lw))| {
                let mut r = rng.substream(rng.stream_id().wrapping_add(chunk as u64));
                let mut scratch = DesignScratch::default();
                let mut batch = WeightedCubeBatch::default();
                for b in 0..lw.len() / len {
                    design.sample_into(&mut r, &mut scratch, &mut batch);
                    om[b * len * c..(b + 1) * len * c].copy_from_slice(&batch.points);
                    for k in 0..len {
                        let row = b * len + k;
                        map.to_standard_into(batch.point(k), &mut uu[row * d..(row + 1) * d]);
                        lw[row] = batch.weights[k].ln();
                    }
                }
            });
        Ok(Self { design: design.clone(), map: *map, n, omega, u, log_w })
    }

    /// Shorthand building the design from its parts.
    pub fn new(method: Method, m: usize, map: CubeMap, n: usize, rng: &RngStream) -> Result<Self> {
        let design = BatchDesign::new(method, m, map.cube_dim())?;
        Self::draw(&design, &map, n, rng)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn method(&self) -> Method {
        self.design.method()
    }

    pub fn m(&self) -> usize {
        self.design.m()
    }

    pub fn map_kind(&self) -> MapKind {
        self.map.kind()
    }

    pub fn design(&self) -> &BatchDesign {
        &self.design
    }

    pub fn map(&self) -> &CubeMap {
        &self.map
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    /// Points per batch.
    pub fn batch_len(&self) -> usize {
        self.design.batch_len()
    }

    /// Batch `i` as drawn on the cube.
    pub fn batch(&self, i: usize) -> WeightedCubeBatch {
        let (len, c) = (self.batch_len(), self.map.cube_dim());
        WeightedCubeBatch {
            points: self.omega[i * len * c..(i + 1) * len * c].to_vec(),
            weights: self.log_w[i * len..(i + 1) * len].iter().map(|w| w.exp()).collect(),
            dim: c,
            method: self.method(),
        }
    }

    fn u_batch(&self, i: usize) -> &[f64] {
        let s = self.batch_len() * self.dim();
        &self.u[i * s..(i + 1) * s]
    }

    fn log_w_batch(&self, i: usize) -> &[f64] {
        let len = self.batch_len();
        &self.log_w[i * len..(i + 1) * len]
    }

    fn check(&self, theta: &GaussianParams, target: &Target) -> Result<()> {
        if theta.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: theta.dim() });
        }
        if target.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: target.dim() });
        }
        Ok(())
    }
}

/// `log R` of one banked batch at `theta`, by a streaming log-sum-exp.
fn batch_log_r(theta: &GaussianParams, target: &Target, u: &[f64], log_w: &[f64], z: &mut [f64]) -> f64 {
    let d = theta.dim();
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for (k, lw) in log_w.iter().enumerate() {
        let uk = &u[k * d..(k + 1) * d];
        theta.affine_into(uk, z);
        let t = lw + target.log_density(z) - theta.log_q_standardized(uk);
        if t.is_nan() {
            return f64::NAN;
        }
        if t > max {
            sum = if max == f64::NEG_INFINITY { 1.0 } else { sum * (max - t).exp() + 1.0 };
            max = t;
        } else if t > f64::NEG_INFINITY {
            sum += (t - max).exp();
        }
    }
    if !max.is_finite() {
        return max;
    }
    max + sum.ln()
}

/// Per-batch `log R` over the bank, in bank order.
pub fn log_r_values(theta: &GaussianParams, bank: &SampleBank, target: &Target) -> Result<Vec<f64>> {
    bank.check(theta, target)?;
    let mut out = vec![0.0; bank.len()];
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let mut z = vec![0.0; theta.dim()];
        for (k, v) in chunk.iter_mut().enumerate() {
            let i = c * CHUNK + k;
            *v = batch_log_r(theta, target, bank.u_batch(i), bank.log_w_batch(i), &mut z);
        }
    });
    Ok(out)
}

/// `(1/N) sum_n log R(batch_n; theta)`. `-inf` if any batch has `R = 0`.
pub fn empirical_elbo(theta: &GaussianParams, bank: &SampleBank, target: &Target) -> Result<f64> {
    let values = log_r_values(theta, bank, target)?;
    Ok(mean_by_chunks(&values))
}

/// Mean and standard error of `log R` over the bank.
pub fn elbo_with_se(theta: &GaussianParams, bank: &SampleBank, target: &Target) -> Result<(f64, f64)> {
    let values = log_r_values(theta, bank, target)?;
    let mean = mean_by_chunks(&values);
    let n = values.len() as f64;
    let var = if values.len() > 1 && mean.is_finite() {
        pairwise_sum(&values.iter().map(|v| (v - mean) * (v - mean)).collect::<Vec<_>>()) / (n - 1.0)
    } else {
        f64::NAN
    };
    Ok((mean, (var / n).sqrt()))
}

fn mean_by_chunks(values: &[f64]) -> f64 {
    let sums: Vec<f64> = values.chunks(CHUNK).map(pairwise_sum).collect();
    pairwise_sum(&sums) / values.len() as f64
}

/// Gradient of the empirical objective with respect to `mu` and the
/// lower-triangular `C` (row-major, zero above the diagonal).
#[derive(Clone, Debug, PartialEq)]
pub struct ElboGradient {
    pub value: f64,
    pub mu: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Value and gradient accumulated over one chunk.
struct ChunkGrad {
    value: f64,
    mu: Vec<f64>,
    scale: Vec<f64>,
}

fn chunk_gradient(theta: &GaussianParams, target: &Target, bank: &SampleBank, chunk: usize) -> ChunkGrad {
    let d = theta.dim();
    let len = bank.batch_len();
    let mut out = ChunkGrad { value: 0.0, mu: vec![0.0; d], scale: vec![0.0; d * d] };
    let mut z = vec![0.0; d];
    let mut terms = vec![0.0; len];
    let mut grads = vec![0.0; len * d];
    let mut values = Vec::with_capacity(CHUNK);
    let start = chunk * CHUNK;
    let end = (start + CHUNK).min(bank.len());
    for i in start..end {
        let u = bank.u_batch(i);
        let log_w = bank.log_w_batch(i);
        let mut max = f64::NEG_INFINITY;
        for k in 0..len {
            let uk = &u[k * d..(k + 1) * d];
            theta.affine_into(uk, &mut z);
            let lp = target.log_density_grad(&z, &mut grads[k * d..(k + 1) * d]);
            terms[k] = log_w[k] + lp - theta.log_q_standardized(uk);
            max = max.max(terms[k]);
        }
        if !max.is_finite() {
            values.push(max);
            continue;
        }
        let total: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        values.push(max + total.ln());
        for k in 0..len {
            let w = (terms[k] - max).exp() / total;
            if w == 0.0 {
                continue;
            }
            let uk = &u[k * d..(k + 1) * d];
            let g = &grads[k * d..(k + 1) * d];
            for r in 0..d {
                let wg = w * g[r];
                out.mu[r] += wg;
                for c in 0..=r {
                    out.scale[r * d + c] += wg * uk[c];
                }
            }
        }
    }
    out.value = pairwise_sum(&values);
    out
}

/// Exact gradient of [`empirical_elbo`] through `z_m = C u_m + mu` with the
/// bank held fixed. Softmax weights over each batch's candidates multiply
/// `grad log p(z_m, x)`; the `log q` term contributes `1 / C_jj` on the
/// diagonal because `log q(C u + mu) = -log det C - |u|^2 / 2 + const`.
pub fn elbo_gradient(theta: &GaussianParams, bank: &SampleBank, target: &Target) -> Result<ElboGradient> {
    bank.check(theta, target)?;
    let d = theta.dim();
    let chunks = bank.len().div_ceil(CHUNK);
    let parts: Vec<ChunkGrad> = (0..chunks).into_par_iter().map(|c| chunk_gradient(theta, target, bank, c)).collect();
    let n = bank.len() as f64;
    let values: Vec<f64> = parts.iter().map(|p| p.value).collect();
    let mut mu = vec![0.0; d];
    let mut scale = vec![0.0; d * d];
    for p in &parts {
        mu.iter_mut().zip(&p.mu).for_each(|(a, b)| *a += b);
        scale.iter_mut().zip(&p.scale).for_each(|(a, b)| *a += b);
    }
    mu.iter_mut().for_each(|x| *x /= n);
    scale.iter_mut().for_each(|x| *x /= n);
    for j in 0..d {
        scale[j * d + j] += 1.0 / theta.scale_at(j, j);
    }
    Ok(ElboGradient { value: pairwise_sum(&values) / n, mu, scale })
}

/// Unconstrained coordinates of `theta`: `mu`, then the lower triangle of `C`
/// row by row with each diagonal entry replaced by its logarithm.
pub fn theta_to_raw(theta: &GaussianParams) -> Vec<f64> {
    let d = theta.dim();
    let mut x = theta.mu().to_vec();
    for i in 0..d {
        for j in 0..=i {
            let c = theta.scale_at(i, j);
            x.push(if i == j { c.ln() } else { c });
        }
    }
    x
}

pub fn raw_to_theta(x: &[f64], d: usize) -> Result<GaussianParams> {
    if x.len() != raw_len(d) {
        return Err(Error::DimensionMismatch { expected: raw_len(d), got: x.len() });
    }
    let mut scale = vec![0.0; d * d];
    let mut k = d;
    for i in 0..d {
        for j in 0..=i {
            scale[i * d + j] = if i == j { x[k].exp() } else { x[k] };
            k += 1;
        }
    }
    GaussianParams::new(x[..d].to_vec(), scale)
}

pub fn raw_len(d: usize) -> usize {
    d + d * (d + 1) / 2
}

/// The gradient in raw coordinates (chain factor `C_jj` on the diagonal).
pub fn raw_gradient(theta: &GaussianParams, g: &ElboGradient) -> Vec<f64> {
    let d = theta.dim();
    let mut out = g.mu.clone();
    for i in 0..d {
        for j in 0..=i {
            let v = g.scale[i * d + j];
            out.push(if i == j { v * theta.scale_at(i, i) } else { v });
        }
    }
    out
}

/// Index of the first batch whose `log R` is not finite.
pub fn first_non_finite(theta: &GaussianParams, bank: &SampleBank, target: &Target) -> Result<Option<usize>> {
    Ok(log_r_values(theta, bank, target)?.iter().position(|v| !v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{builtin_target, TargetSpec};

    fn cart(d: usize) -> CubeMap {
        CubeMap::new(MapKind::Cartesian, d).unwrap()
    }

    #[test]
    fn exact_q_gives_zero_objective() {
        let target = builtin_target(&"gaussian(1,4)".parse().unwrap()).unwrap();
        let theta = GaussianParams::isotropic(vec![1.0], 2.0);
        let bank = SampleBank::new(Method::Anti, 4, cart(1), 1000, &RngStream::new(1, 0)).unwrap();
        assert!(empirical_elbo(&theta, &bank, &target).unwrap().abs() < 1e-12);
        let g = elbo_gradient(&theta, &bank, &target).unwrap();
        // Antithetic pairs cancel the location gradient exactly. The scale
        // gradient is (1 - mean u^2) / 2 on this bank, zero only in expectation.
        assert!(g.mu[0].abs() < 1e-10, "{g:?}");
        let mean_u2 = bank.u.iter().map(|u| u * u).sum::<f64>() / bank.u.len() as f64;
        assert!((g.scale[0] - 0.5 * (1.0 - mean_u2)).abs() < 1e-12, "{g:?}");
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let target = builtin_target(&TargetSpec::SkewedMixture1d).unwrap();
        let theta = GaussianParams::isotropic(vec![0.2], 1.3);
        let rng = RngStream::new(5, 3);
        let bank = SampleBank::new(Method::Qmc, 8, cart(1), 3000, &rng).unwrap();
        let a = empirical_elbo(&theta, &bank, &target).unwrap();
        assert_eq!(a.to_bits(), empirical_elbo(&theta, &bank, &target).unwrap().to_bits());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (b, bank2) = pool.install(|| {
            let bank2 = SampleBank::new(Method::Qmc, 8, cart(1), 3000, &rng).unwrap();
            (empirical_elbo(&theta, &bank2, &target).unwrap(), bank2)
        });
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(bank.u, bank2.u);
    }

    #[test]
    fn raw_round_trip() {
        let theta = GaussianParams::new(vec![0.5, -1.0], vec![1.5, 0.0, 0.3, 0.7]).unwrap();
        let x = theta_to_raw(&theta);
        assert_eq!(x.len(), raw_len(2));
        let back = raw_to_theta(&x, 2).unwrap();
        for (a, b) in back.scale().iter().zip(theta.scale()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_batches_give_negative_infinity() {
        let target = builtin_target(&TargetSpec::StdGaussian { dim: 1 }).unwrap();
        // A density that vanishes on half the line.
        #[derive(Debug)]
        struct HalfLine;
        impl crate::targets::LogDensity for HalfLine {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, z: &[f64]) -> f64 {
                if z[0] > 0.0 {
                    -z[0]
                } else {
                    f64::NEG_INFINITY
                }
            }
            fn log_density_grad(&self, z: &[f64], g: &mut [f64]) -> f64 {
                g[0] = -1.0;
                self.log_density(z)
            }
        }
        let half = Target::new("half", std::sync::Arc::new(HalfLine));
        let theta = GaussianParams::standard(1);
        let bank = SampleBank::new(Method::Iid, 1, cart(1), 200, &RngStream::new(2, 0)).unwrap();
        assert_eq!(empirical_elbo(&theta, &bank, &half).unwrap(), f64::NEG_INFINITY);
        assert!(first_non_finite(&theta, &bank, &half).unwrap().is_some());
        assert!(empirical_elbo(&theta, &bank, &target).unwrap().is_finite());
    }
}
