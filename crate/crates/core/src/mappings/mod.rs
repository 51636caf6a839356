//! The pipeline `omega -> u -> z`: unit cube to standard normal, then the
//! affine map `z = C u + mu` of the Gaussian variational family.

pub mod special;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use special::{chi_inv_cdf, gaussian_inv_cdf, norm_cdf};

/// Cube coordinates are clamped to `[EDGE, 1 - EDGE]` before inversion.
pub const EDGE: f64 = 1e-15;

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// Componentwise inverse normal CDF.
    Cartesian,
    /// Radius from the inverse chi CDF of `omega_1`, direction from the
    /// normalized inverse normal CDF of the remaining `d` coordinates.
    Elliptical,
    /// Two-dimensional elliptical map with the direction at angle `2 pi omega_2`.
    EllipticalAngle,
}

impl MapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Cartesian => "cartesian",
            MapKind::Elliptical => "elliptical",
            MapKind::EllipticalAngle => "elliptical_angle",
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartesian" => Ok(MapKind::Cartesian),
            "elliptical" => Ok(MapKind::Elliptical),
            "elliptical_angle" => Ok(MapKind::EllipticalAngle),
            _ => Err(Error::InvalidParameter(format!("unknown map kind `{s}`"))),
        }
    }
}

/// A map from the unit cube of dimension [`cube_dim`](Self::cube_dim) to
/// `N(0, I_d)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CubeMap {
    kind: MapKind,
    dim: usize,
}

#[inline]
fn clamp_edge(w: f64) -> f64 {
    w.clamp(EDGE, 1.0 - EDGE)
}

impl CubeMap {
    pub fn new(kind: MapKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("map dimension must be positive".into()));
        }
        if kind == MapKind::EllipticalAngle && dim != 2 {
            return Err(Error::InvalidParameter("the angle form of the elliptical map is two-dimensional".into()));
        }
        Ok(Self { kind, dim })
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    /// Dimension of `z` and `u`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Dimension of `omega`.
    pub fn cube_dim(&self) -> usize {
        match self.kind {
            MapKind::Cartesian | MapKind::EllipticalAngle => self.dim,
            MapKind::Elliptical => self.dim + 1,
        }
    }

    /// Writes `u = F^{-1}(omega)` into `u`. Coordinates at or beyond the cube
    /// boundary are clamped to [`EDGE`].
    pub fn to_standard_into(&self, omega: &[f64], u: &mut [f64]) {
        debug_assert_eq!(omega.len(), self.cube_dim());
        debug_assert_eq!(u.len(), self.dim);
        match self.kind {
            MapKind::Cartesian => {
                for (ui, &w) in u.iter_mut().zip(omega) {
                    *ui = special::inv_norm_cdf(clamp_edge(w));
                }
            }
            MapKind::Elliptical => {
                let r = special::chi_inv_unchecked(clamp_edge(omega[0]), self.dim);
                let mut norm2 = 0.0;
                for (ui, &w) in u.iter_mut().zip(&omega[1..]) {
                    *ui = special::inv_norm_cdf(clamp_edge(w));
                    norm2 += *ui * *ui;
                }
                let scale = if norm2 > 0.0 { r / norm2.sqrt() } else { 0.0 };
                if norm2 > 0.0 {
                    u.iter_mut().for_each(|ui| *ui *= scale);
                } else {
                    // All direction coordinates at the median: any unit vector will do.
                    u.iter_mut().for_each(|ui| *ui = 0.0);
                    u[0] = r;
                }
            }
            MapKind::EllipticalAngle => {
                let r = special::chi_inv_unchecked(clamp_edge(omega[0]), 2);
                let angle = 2.0 * PI * omega[1];
                u[0] = r * angle.cos();
                u[1] = r * angle.sin();
            }
        }
    }

    pub fn to_standard(&self, omega: &[f64]) -> Result<Vec<f64>> {
        if omega.len() != self.cube_dim() {
            return Err(Error::DimensionMismatch { expected: self.cube_dim(), got: omega.len() });
        }
        let mut u = vec![0.0; self.dim];
        self.to_standard_into(omega, &mut u);
        Ok(u)
    }
}

/// `map_cube_to_standard` in functional form.
pub fn map_cube_to_standard(map: &CubeMap, omega: &[f64]) -> Result<Vec<f64>> {
    map.to_standard(omega)
}

/// Parameters `theta = (mu, C)` of `q = N(mu, C C^T)` with `C` lower
/// triangular (row-major) and strictly positive on the diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "GaussianParamsRepr", try_from = "GaussianParamsRepr")]
pub struct GaussianParams {
    mu: Vec<f64>,
    scale: Vec<f64>,
    log_det: f64,
}

#[derive(Clone, Serialize, Deserialize)]
struct GaussianParamsRepr {
    mu: Vec<f64>,
    scale: Vec<f64>,
}

impl From<GaussianParams> for GaussianParamsRepr {
    fn from(g: GaussianParams) -> Self {
        Self { mu: g.mu, scale: g.scale }
    }
}

impl TryFrom<GaussianParamsRepr> for GaussianParams {
    type Error = Error;

    fn try_from(r: GaussianParamsRepr) -> Result<Self> {
        GaussianParams::new(r.mu, r.scale)
    }
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidParameter("empty mean vector".into()));
        }
        if scale.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, got: scale.len() });
        }
        for i in 0..d {
            for j in i + 1..d {
                if scale[i * d + j] != 0.0 {
                    return Err(Error::InvalidParameter(format!("scale is not lower triangular at ({i}, {j})")));
                }
            }
            let c = scale[i * d + i];
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidParameter(format!("scale diagonal {i} must be positive, got {c}")));
            }
        }
        if mu.iter().chain(&scale).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite Gaussian parameter".into()));
        }
        let log_det = (0..d).map(|i| scale[i * d + i].ln()).sum();
        Ok(Self { mu, scale, log_det })
    }

    pub fn standard(d: usize) -> Self {
        Self::isotropic(vec![0.0; d], 1.0)
    }

    pub fn isotropic(mu: Vec<f64>, sd: f64) -> Self {
        let d = mu.len();
        let sds = vec![sd; d];
        Self::diagonal(mu, &sds)
    }

    pub fn diagonal(mu: Vec<f64>, sds: &[f64]) -> Self {
        let d = mu.len();
        let mut scale = vec![0.0; d * d];
        for (i, &s) in sds.iter().enumerate() {
            scale[i * d + i] = s;
        }
        Self::new(mu, scale).expect("positive diagonal")
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Row-major lower-triangular factor `C`.
    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn scale_at(&self, i: usize, j: usize) -> f64 {
        self.scale[i * self.dim() + j]
    }

    /// `sum_j log C_jj`, half the log-determinant of the covariance.
    pub fn log_det_scale(&self) -> f64 {
        self.log_det
    }

    /// Covariance `C C^T`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..=i.min(j)).map(|k| self.scale[i * d + k] * self.scale[j * d + k]).sum();
            }
        }
        out
    }

    /// `z = C u + mu` into `z`.
    #[inline]
    pub fn affine_into(&self, u: &[f64], z: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let row = &self.scale[i * d..i * d + i + 1];
            z[i] = self.mu[i] + row.iter().zip(u).map(|(c, x)| c * x).sum::<f64>();
        }
    }

    /// `u = C^{-1} (z - mu)` by forward substitution.
    pub fn solve_into(&self, z: &[f64], u: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut acc = z[i] - self.mu[i];
            for j in 0..i {
                acc -= self.scale[i * d + j] * u[j];
            }
            u[i] = acc / self.scale[i * d + i];
        }
    }

    pub fn solve(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z.len())?;
        let mut u = vec![0.0; self.dim()];
        self.solve_into(z, &mut u);
        Ok(u)
    }

    /// `log q(z)` given the standardized point `u = C^{-1}(z - mu)`.
    #[inline]
    pub fn log_q_standardized(&self, u: &[f64]) -> f64 {
        let d = self.dim() as f64;
        -d * HALF_LN_TAU - self.log_det_scale() - 0.5 * u.iter().map(|x| x * x).sum::<f64>()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got });
        }
        Ok(())
    }
}

/// `z = C u + mu`.
pub fn affine_map(theta: &GaussianParams, u: &[f64]) -> Result<Vec<f64>> {
    theta.check_dim(u.len())?;
    let mut z = vec![0.0; theta.dim()];
    theta.affine_into(u, &mut z);
    Ok(z)
}

/// `log N(z; mu, C C^T)` via a forward triangular solve.
pub fn log_q(theta: &GaussianParams, z: &[f64]) -> Result<f64> {
    let u = theta.solve(z)?;
    Ok(theta.log_q_standardized(&u))
}

/// `log N(u; 0, I)`.
pub fn log_std_normal(u: &[f64]) -> f64 {
    -(u.len() as f64) * HALF_LN_TAU - 0.5 * u.iter().map(|x| x * x).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube_sampling::RngStream;

    const LOG_STD_MODE: f64 = -0.918_938_533_204_672_8;

    #[test]
    fn cartesian_medians() {
        let m = CubeMap::new(MapKind::Cartesian, 2).unwrap();
        assert_eq!(m.to_standard(&[0.5, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn elliptical_angle_quarter_turn() {
        let m = CubeMap::new(MapKind::EllipticalAngle, 2).unwrap();
        let p = 1.0 - (-0.5f64).exp();
        let u = m.to_standard(&[p, 0.25]).unwrap();
        assert!(u[0].abs() < 1e-12);
        assert!((u[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn elliptical_norm_is_chi_quantile() {
        let mut rng = RngStream::new(3, 0);
        for d in [1, 2, 3, 5] {
            let m = CubeMap::new(MapKind::Elliptical, d).unwrap();
            for _ in 0..200 {
                let omega: Vec<f64> = (0..d + 1).map(|_| rng.uniform()).collect();
                let u = m.to_standard(&omega).unwrap();
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let r = chi_inv_cdf(omega[0], d).unwrap();
                assert!((norm - r).abs() <= 1e-12 * r.max(1.0));
            }
        }
    }

    #[test]
    fn cartesian_antithetic_commutes() {
        let m = CubeMap::new(MapKind::Cartesian, 3).unwrap();
        let theta =
            GaussianParams::new(vec![1.0, -2.0, 0.5], vec![2.0, 0.0, 0.0, 0.3, 1.0, 0.0, -0.2, 0.4, 0.7]).unwrap();
        let mut rng = RngStream::new(8, 0);
        for _ in 0..100 {
            let w: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
            let wr: Vec<f64> = w.iter().map(|x| 1.0 - x).collect();
            let u = m.to_standard(&w).unwrap();
            let ur = m.to_standard(&wr).unwrap();
            for (a, b) in u.iter().zip(&ur) {
                assert_eq!(*a, -*b);
            }
            let z = affine_map(&theta, &u).unwrap();
            let zr = affine_map(&theta, &ur).unwrap();
            for i in 0..3 {
                assert!((zr[i] - (2.0 * theta.mu()[i] - z[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn boundary_coordinates_are_clamped() {
        let m = CubeMap::new(MapKind::Cartesian, 2).unwrap();
        let u = m.to_standard(&[0.0, 1.0]).unwrap();
        assert!(u[0].is_finite() && u[0] < -7.0);
        assert!(u[1].is_finite() && u[1] > 7.0);
        let e = CubeMap::new(MapKind::Elliptical, 2).unwrap();
        assert!(e.to_standard(&[1.0, 0.0, 1.0]).unwrap().iter().all(|x| x.is_finite()));
        assert!(m.to_standard(&[0.5]).is_err());
    }

    #[test]
    fn angle_form_requires_two_dimensions() {
        assert!(CubeMap::new(MapKind::EllipticalAngle, 3).is_err());
        assert_eq!(CubeMap::new(MapKind::Elliptical, 3).unwrap().cube_dim(), 4);
    }

    #[test]
    fn affine_examples() {
        let id = GaussianParams::standard(2);
        assert_eq!(affine_map(&id, &[0.3, -1.2]).unwrap(), vec![0.3, -1.2]);
        let t = GaussianParams::diagonal(vec![1.0, 1.0], &[2.0, 3.0]);
        assert_eq!(affine_map(&t, &[1.0, -1.0]).unwrap(), vec![3.0, -2.0]);
        assert!(affine_map(&t, &[1.0]).is_err());
    }

    #[test]
    fn solve_inverts_affine() {
        let t = GaussianParams::new(vec![0.5, -1.0, 2.0], vec![1.5, 0.0, 0.0, -0.3, 0.8, 0.0, 0.2, 0.9, 2.2]).unwrap();
        let u = [0.4, -1.7, 2.5];
        let z = affine_map(&t, &u).unwrap();
        let back = t.solve(&z).unwrap();
        for (a, b) in back.iter().zip(u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_rejects_bad_scales() {
        assert!(GaussianParams::new(vec![0.0, 0.0], vec![1.0, 0.1, 0.0, 1.0]).is_err());
        assert!(GaussianParams::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianParams::new(vec![0.0], vec![-1.0]).is_err());
        assert!(GaussianParams::new(vec![0.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn log_q_examples() {
        assert!((log_q(&GaussianParams::standard(1), &[0.0]).unwrap() - LOG_STD_MODE).abs() < 1e-15);
        let t = GaussianParams::diagonal(vec![0.0], &[2.0]);
        assert!((log_q(&t, &[0.0]).unwrap() - (LOG_STD_MODE - 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn log_q_integrates_to_one() {
        let t = GaussianParams::diagonal(vec![0.7], &[1.3]);
        let (lo, hi, n) = (-15.0, 15.0, 200_001);
        let h = (hi - lo) / (n - 1) as f64;
        let mut s = 0.0;
        for i in 0..n {
            let z = lo + i as f64 * h;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            s += w * log_q(&t, &[z]).unwrap().exp();
        }
        assert!((s * h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_q_change_of_variables() {
        let t = GaussianParams::new(vec![0.5, -1.0], vec![1.5, 0.0, -0.3, 0.8]).unwrap();
        let mut rng = RngStream::new(1, 2);
        for _ in 0..100 {
            let u = [rng.uniform() * 4.0 - 2.0, rng.uniform() * 4.0 - 2.0];
            let z = affine_map(&t, &u).unwrap();
            let lhs = log_q(&t, &z).unwrap();
            let rhs = log_std_normal(&u) - t.log_det_scale();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    fn pushforward_moments(kind: MapKind, d: usize, n: usize) {
        let m = CubeMap::new(kind, d).unwrap();
        let mut rng = RngStream::new(11, kind as u64);
        let mut omega = vec![0.0; m.cube_dim()];
        let mut u = vec![0.0; d];
        let mut sum = vec![0.0; d];
        let mut sum2 = vec![0.0; d * d];
        let mut sum4 = vec![0.0; d * d];
        for _ in 0..n {
            omega.iter_mut().for_each(|w| *w = rng.uniform());
            m.to_standard_into(&omega, &mut u);
            for i in 0..d {
                sum[i] += u[i];
                for j in 0..d {
                    let p = u[i] * u[j];
                    sum2[i * d + j] += p;
                    sum4[i * d + j] += p * p;
                }
            }
        }
        let nf = n as f64;
        for i in 0..d {
            let mean = sum[i] / nf;
            assert!(mean.abs() < 3.0 / nf.sqrt(), "{kind} mean {i} = {mean}");
            for j in 0..d {
                let c = sum2[i * d + j] / nf;
                let target = if i == j { 1.0 } else { 0.0 };
                let var = sum4[i * d + j] / nf - c * c;
                let se = (var / nf).sqrt();
                assert!((c - target).abs() < 3.0 * se, "{kind} cov ({i},{j}) = {c} se {se}");
            }
        }
    }

    #[test]
    fn pushforward_is_standard_normal() {
        pushforward_moments(MapKind::Cartesian, 2, 1_000_000);
        pushforward_moments(MapKind::Elliptical, 2, 1_000_000);
        pushforward_moments(MapKind::Elliptical, 3, 1_000_000);
        pushforward_moments(MapKind::EllipticalAngle, 2, 1_000_000);
    }
}
