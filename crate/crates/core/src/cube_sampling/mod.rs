//! Batches of unit-cube points whose members are each marginally uniform.
//!
//! Every method draws a vector of raw uniforms `xi` (plus, for Latin
//! hypercubes, one permutation per coordinate) and builds the batch from it
//! deterministically. Samplers and the quadrature validity checks share that
//! construction through [`BatchDesign::build`].

mod halton;
mod rng;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use halton::{halton_points, radical_inverse, PRIMES};
pub use rng::{mix_seed, RngStream};

/// The batch construction, named as on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Iid,
    Anti,
    Strat,
    AntiStrat,
    Qmc,
    Lhs,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Iid, Method::Anti, Method::Strat, Method::AntiStrat, Method::Qmc, Method::Lhs];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Iid => "iid",
            Method::Anti => "anti",
            Method::Strat => "strat",
            Method::AntiStrat => "anti_strat",
            Method::Qmc => "qmc",
            Method::Lhs => "lhs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown sampling method `{s}`")))
    }
}

/// `len` cube points of dimension `dim` (row-major) with weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedCubeBatch {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub dim: usize,
    pub method: Method,
}

impl Default for WeightedCubeBatch {
    fn default() -> Self {
        Self::empty(Method::Iid, 0)
    }
}

impl WeightedCubeBatch {
    pub fn empty(method: Method, dim: usize) -> Self {
        Self { points: Vec::new(), weights: Vec::new(), dim, method }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, m: usize) -> &[f64] {
        &self.points[m * self.dim..(m + 1) * self.dim]
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }
}

/// Largest float strictly below `x` for positive finite `x`.
fn below(x: f64) -> f64 {
    x.next_down()
}

/// Maps a uniform `xi` into slab `[m / n, (m + 1) / n)`.
fn into_slab(m: usize, n: usize, xi: f64) -> f64 {
    let lo = m as f64 / n as f64;
    let hi = (m + 1) as f64 / n as f64;
    ((m as f64 + xi) / n as f64).clamp(lo, below(hi))
}

/// A validated batch construction: method, requested batch parameter `M` and
/// cube dimension.
///
/// For `anti_strat`, `M` counts strata and the batch holds `2M` points; for every
/// other method the batch holds `M` points.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchDesign {
    method: Method,
    m: usize,
    dim: usize,
    lattice: Vec<f64>,
}

impl BatchDesign {
    pub fn new(method: Method, m: usize, dim: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter("batch size M must be at least 1".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("cube dimension must be at least 1".into()));
        }
        if method == Method::Anti && !m.is_multiple_of(2) {
            return Err(Error::OddAntitheticBatch(m));
        }
        let lattice = if method == Method::Qmc {
            if dim > PRIMES.len() {
                return Err(Error::PrimeTableExceeded { dim, max: PRIMES.len() });
            }
            halton_points(m, dim)
        } else {
            Vec::new()
        };
        Ok(Self { method, m, dim, lattice })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// The batch parameter `M` as configured.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of points in each emitted batch.
    pub fn batch_len(&self) -> usize {
        match self.method {
            Method::AntiStrat => 2 * self.m,
            _ => self.m,
        }
    }

    /// Number of raw uniforms consumed per batch.
    pub fn n_uniforms(&self) -> usize {
        match self.method {
            Method::Iid | Method::Strat | Method::AntiStrat | Method::Lhs => self.m * self.dim,
            Method::Anti => self.m / 2 * self.dim,
            Method::Qmc => self.dim,
        }
    }

    /// Whether the batch also depends on one permutation of `0..M` per coordinate.
    pub fn uses_permutations(&self) -> bool {
        self.method == Method::Lhs
    }

    /// The fixed low-discrepancy points before rotation (QMC only).
    pub fn lattice(&self) -> &[f64] {
        &self.lattice
    }

    /// Deterministic construction from raw uniforms `xi` (length
    /// [`n_uniforms`](Self::n_uniforms)) and, for Latin hypercubes, permutations
    /// laid out coordinate-major: `perms[j * M + m]`.
    pub fn build(&self, xi: &[f64], perms: &[usize], out: &mut WeightedCubeBatch) {
        debug_assert_eq!(xi.len(), self.n_uniforms());
        let d = self.dim;
        let m_count = self.m;
        let len = self.batch_len();
        out.method = self.method;
        out.dim = d;
        out.points.clear();
        out.weights.clear();
        match self.method {
            Method::Iid => out.points.extend_from_slice(xi),
            Method::Anti => {
                for pair in xi.chunks_exact(d) {
                    out.points.extend_from_slice(pair);
                    out.points.extend(pair.iter().map(|w| 1.0 - w));
                }
            }
            Method::Strat => {
                for (m, row) in xi.chunks_exact(d).enumerate() {
                    out.points.push(into_slab(m, m_count, row[0]));
                    out.points.extend_from_slice(&row[1..]);
                }
            }
            Method::AntiStrat => {
                for (m, row) in xi.chunks_exact(d).enumerate() {
                    let lo = m as f64 / m_count as f64;
                    let hi = below((m + 1) as f64 / m_count as f64);
                    let first = into_slab(m, m_count, row[0]);
                    out.points.push(first);
                    out.points.extend_from_slice(&row[1..]);
                    let mirrored = ((2 * m + 1) as f64 / m_count as f64 - first).clamp(lo, hi);
                    out.points.push(mirrored);
                    out.points.extend(row[1..].iter().map(|w| 1.0 - w));
                }
            }
            Method::Qmc => {
                for base in self.lattice.chunks_exact(d) {
                    for (b, s) in base.iter().zip(xi) {
                        let mut x = b + s;
                        if x >= 1.0 {
                            x -= 1.0;
                        }
                        out.points.push(x);
                    }
                }
            }
            Method::Lhs => {
                debug_assert_eq!(perms.len(), d * m_count);
                for m in 0..m_count {
                    for j in 0..d {
                        let cell = perms[j * m_count + m];
                        out.points.push(into_slab(cell, m_count, xi[m * d + j]));
                    }
                }
            }
        }
        out.weights.resize(len, 1.0 / len as f64);
    }

    /// Draws the next batch into `out`, reusing its buffers.
    pub fn sample_into(&self, rng: &mut RngStream, scratch: &mut DesignScratch, out: &mut WeightedCubeBatch) {
        scratch.xi.clear();
        scratch.xi.extend((0..self.n_uniforms()).map(|_| rng.uniform()));
        scratch.perms.clear();
        if self.uses_permutations() {
            for _ in 0..self.dim {
                rng.permutation_into(self.m, &mut scratch.perm);
                scratch.perms.extend_from_slice(&scratch.perm);
            }
        }
        self.build(&scratch.xi, &scratch.perms, out);
    }

    pub fn sample(&self, rng: &mut RngStream) -> WeightedCubeBatch {
        let mut out = WeightedCubeBatch::empty(self.method, self.dim);
        self.sample_into(rng, &mut DesignScratch::default(), &mut out);
        out
    }
}

/// Reusable buffers for [`BatchDesign::sample_into`].
#[derive(Clone, Debug, Default)]
pub struct DesignScratch {
    xi: Vec<f64>,
    perms: Vec<usize>,
    perm: Vec<usize>,
}

pub fn sample_iid(rng: &mut RngStream, m: usize, d: usize) -> Result<WeightedCubeBatch> {
    Ok(BatchDesign::new(Method::Iid, m, d)?.sample(rng))
}

/// `M / 2` uniforms, each followed by its reflection `1 - omega`.
pub fn sample_antithetic(rng: &mut RngStream, m: usize, d: usize) -> Result<WeightedCubeBatch> {
    Ok(BatchDesign::new(Method::Anti, m, d)?.sample(rng))
}

/// One point per equal-probability slab of the first coordinate.
pub fn sample_stratified(rng: &mut RngStream, m: usize, d: usize) -> Result<WeightedCubeBatch> {
    Ok(BatchDesign::new(Method::Strat, m, d)?.sample(rng))
}

/// `2M` points: per first-coordinate slab, a point and its in-slab reflection.
pub fn sample_antithetic_stratified(rng: &mut RngStream, m: usize, d: usize) -> Result<WeightedCubeBatch> {
    Ok(BatchDesign::new(Method::AntiStrat, m, d)?.sample(rng))
}

/// Halton points rotated by one uniform shift per batch (Cranley-Patterson).
pub fn sample_rqmc(rng: &mut RngStream, m: usize, d: usize) -> Result<WeightedCubeBatch> {
    Ok(BatchDesign::new(Method::Qmc, m, d)?.sample(rng))
}

/// Latin hypercube with fresh permutations per batch.
pub fn sample_lhs(rng: &mut RngStream, m: usize, d: usize) -> Result<WeightedCubeBatch> {
    Ok(BatchDesign::new(Method::Lhs, m, d)?.sample(rng))
}
