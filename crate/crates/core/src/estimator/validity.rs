//! Deterministic quadrature of `Q(omega) R(omega) a(z | omega)` over the
//! batch randomness for one-dimensional targets.
//!
//! Each raw uniform driving the batch is integrated on its own axis. Axes are
//! split at points where a cube coordinate wraps (QMC rotation) or where the
//! map is discontinuous, and every piece is gridded through `xi = Phi(t)` on a
//! uniform `t` grid so cells shrink towards the ends, where the mapped points
//! run off into the tails. Cell masses use a second-order star rule around the
//! midpoint, and each candidate's share is spread over the range of `z_m`
//! across the cell with a density linear in `z`. Latin hypercube permutations
//! are summed exactly.

use crate::cube_sampling::{Method, WeightedCubeBatch};
use crate::mappings::{norm_cdf, MapKind};
use crate::targets::Target;
use crate::{Error, Result};

use super::{CandidateSet, EstimatorCouplingPair};

const T_RANGE: f64 = 8.5;
const MIN_BIN_MASS: f64 = 1e-6;
const MAX_PERMUTATIONS: usize = 5040;

/// Bin edges on the `z` axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityGrid {
    edges: Vec<f64>,
}

impl ValidityGrid {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidParameter("grid edges must be finite and strictly increasing".into()));
        }
        Ok(Self { edges })
    }

    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidParameter("grid needs at least one bin".into()));
        }
        Self::new((0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect())
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Adds `mass` spread uniformly over `[a, b]`. Returns the part that falls
    /// outside the grid.
    fn spread(&self, bins: &mut [f64], mass: f64, a: f64, b: f64) -> f64 {
        let e = &self.edges;
        let (lo, hi) = (e[0], e[e.len() - 1]);
        if b <= a {
            if a < lo || a >= hi {
                return mass;
            }
            let k = e.partition_point(|&x| x <= a) - 1;
            bins[k] += mass;
            return 0.0;
        }
        let density = mass / (b - a);
        let (ca, cb) = (a.max(lo), b.min(hi));
        if ca >= cb {
            return mass;
        }
        let mut k = e.partition_point(|&x| x <= ca).saturating_sub(1);
        let mut inside = 0.0;
        while k < bins.len() && e[k] < cb {
            let w = (e[k + 1].min(cb) - e[k].max(ca)) * density;
            bins[k] += w;
            inside += w;
            k += 1;
        }
        mass - inside
    }

    /// Adds `mass` over `[a, b]` with density varying linearly from `ga` at
    /// `a` to `gb` at `b`.
    fn spread_linear(&self, bins: &mut [f64], mass: f64, (a, ga): (f64, f64), (b, gb): (f64, f64)) {
        let ((a, ga), (b, gb)) = if a <= b { ((a, ga), (b, gb)) } else { ((b, gb), (a, ga)) };
        let len = b - a;
        let area = 0.5 * (ga + gb) * len;
        if !(len > 0.0 && ga >= 0.0 && gb >= 0.0 && area > 0.0 && area.is_finite()) {
            self.spread(bins, mass, a, b);
            return;
        }
        let e = &self.edges;
        let (ca, cb) = (a.max(e[0]), b.min(e[e.len() - 1]));
        if ca >= cb {
            return;
        }
        let scale = mass / area;
        let slope = (gb - ga) / len;
        let cum = |x: f64| ga * (x - a) + 0.5 * slope * (x - a) * (x - a);
        let mut k = e.partition_point(|&x| x <= ca).saturating_sub(1);
        while k < bins.len() && e[k] < cb {
            let (x0, x1) = (e[k].max(ca), e[k + 1].min(cb));
            bins[k] += scale * (cum(x1) - cum(x0));
            k += 1;
        }
    }

    /// Spreads the mass of one cell given the mapped point and the mass
    /// density (per unit of the grid variable `t`) at its low end, centre and
    /// high end. The two halves get their quadratic-rule share of the mass and
    /// a density in `z` that is linear between the ends.
    fn spread_quadratic(&self, bins: &mut [f64], mass: f64, z: [f64; 3], f: [f64; 3]) {
        let monotone = (z[0] <= z[1] && z[1] <= z[2]) || (z[0] >= z[1] && z[1] >= z[2]);
        if !monotone || z[0] == z[2] {
            let (lo, hi) = (z[0].min(z[1]).min(z[2]), z[0].max(z[1]).max(z[2]));
            self.spread(bins, mass, lo, hi);
            return;
        }
        // dz/dt of the quadratic through the three points, in units of half a cell.
        let d_lo = 0.5 * (-3.0 * z[0] + 4.0 * z[1] - z[2]);
        let d_mid = 0.5 * (z[2] - z[0]);
        let d_hi = 0.5 * (z[0] - 4.0 * z[1] + 3.0 * z[2]);
        let simpson = f[0] + 4.0 * f[1] + f[2];
        let left = ((5.0 * f[0] + 8.0 * f[1] - f[2]) / (4.0 * simpson)).clamp(0.0, 1.0);
        let g = |fv: f64, dz: f64| if dz != 0.0 { fv / dz.abs() } else { f64::NAN };
        let (g_lo, g_mid, g_hi) = (g(f[0], d_lo), g(f[1], d_mid), g(f[2], d_hi));
        self.spread_linear(bins, mass * left, (z[0], g_lo), (z[1], g_mid));
        self.spread_linear(bins, mass * (1.0 - left), (z[1], g_mid), (z[2], g_hi));
    }

    /// Composite Simpson integral of `exp(log p)` over each bin.
    fn target_masses(&self, target: &Target) -> Vec<f64> {
        const SUB: usize = 32;
        self.edges
            .windows(2)
            .map(|w| {
                let h = (w[1] - w[0]) / SUB as f64;
                let f = |i: usize| target.log_density(&[w[0] + i as f64 * h]).exp();
                let mut s = f(0) + f(SUB);
                for i in 1..SUB {
                    s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i);
                }
                s * h / 3.0
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    t_lo: f64,
    t_mid: f64,
    t_hi: f64,
    lo: f64,
    mid: f64,
    hi: f64,
    /// Width of the axis piece the cell belongs to.
    width: f64,
    /// Exact probability of the cell; only the tests read it.
    #[cfg_attr(not(test), allow(dead_code))]
    vol: f64,
}

impl Cell {
    fn corner(&self, which: usize) -> (f64, f64) {
        match which {
            0 => (self.t_lo, self.lo),
            1 => (self.t_mid, self.mid),
            _ => (self.t_hi, self.hi),
        }
    }
}

/// Points inside `(0, 1)` where the cube coordinates driven by uniform `k`
/// wrap or cross a discontinuity of the map.
fn breakpoints(pair: &EstimatorCouplingPair, k: usize) -> Vec<f64> {
    let design = pair.design();
    let c = design.dim();
    let j = k % c;
    let critical: &[f64] = if pair.map().kind() == MapKind::Elliptical && j >= 1 { &[0.5] } else { &[] };
    let mut out = Vec::new();
    match design.method() {
        Method::Qmc => {
            for base in design.lattice().chunks_exact(c) {
                let h = base[j];
                if h > 0.0 {
                    out.push(1.0 - h);
                }
                out.extend(critical.iter().map(|v| (v - h).rem_euclid(1.0)));
            }
        }
        Method::Lhs => out.extend(critical.iter().map(|v| (v * design.m() as f64).fract())),
        _ => out.extend_from_slice(critical),
    }
    out.retain(|&b| b > 0.0 && b < 1.0);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

fn axis_cells(breaks: &[f64], n: usize) -> Vec<Cell> {
    let n = n + n % 2;
    let mut knots = vec![0.0];
    knots.extend_from_slice(breaks);
    knots.push(1.0);
    let dt = 2.0 * T_RANGE / n as f64;
    let mut cells = Vec::with_capacity(n * (knots.len() - 1));
    for seg in knots.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let w = b - a;
        // Lower half measured from a, upper half from b, to keep tail cells accurate.
        let at = |t: f64| if t <= 0.0 { a + w * norm_cdf(t) } else { b - w * norm_cdf(-t) };
        for i in 0..n {
            let t_lo = -T_RANGE + i as f64 * dt;
            let t_hi = t_lo + dt;
            let t_mid = 0.5 * (t_lo + t_hi);
            let vol = if t_hi <= 0.0 {
                w * (norm_cdf(t_hi) - norm_cdf(t_lo))
            } else {
                w * (norm_cdf(-t_lo) - norm_cdf(-t_hi))
            };
            let mid = at(t_mid);
            let lo = at(t_lo).max(a).next_up().min(mid);
            let hi = at(t_hi).min(b).next_down().max(mid);
            cells.push(Cell { t_lo, t_mid, t_hi, lo, mid, hi, width: w, vol });
        }
    }
    cells
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, left: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..left.len() {
            let v = left.remove(i);
            prefix.push(v);
            rec(prefix, left, out);
            prefix.pop();
            left.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..m).collect(), &mut out);
    out
}

/// All coordinate-major permutation tuples for a Latin hypercube design, or a
/// single empty tuple.
fn permutation_tuples(pair: &EstimatorCouplingPair) -> Result<Vec<Vec<usize>>> {
    let design = pair.design();
    if !design.uses_permutations() {
        return Ok(vec![Vec::new()]);
    }
    let single = permutations(design.m());
    let count = (0..design.dim()).try_fold(1usize, |acc, _| acc.checked_mul(single.len()));
    if count.is_none_or(|n| n > MAX_PERMUTATIONS) {
        return Err(Error::InvalidParameter("too many Latin hypercube permutations to sum exactly".into()));
    }
    let mut tuples: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..design.dim() {
        tuples = tuples.iter().flat_map(|t| single.iter().map(move |p| t.iter().chain(p).copied().collect())).collect();
    }
    Ok(tuples)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Weighting {
    /// `R a(z_m | omega)`: should reproduce `p(z, x)`.
    Joint,
    /// `a(z_m | omega)`: the marginal `Q(z)`.
    Coupling,
}

fn binned_mass(pair: &EstimatorCouplingPair, grid: &ValidityGrid, n: usize, weighting: Weighting) -> Result<Vec<f64>> {
    if pair.dim() != 1 {
        return Err(Error::InvalidParameter(format!("quadrature needs a one-dimensional target, got {}", pair.dim())));
    }
    let design = pair.design();
    let k_axes = design.n_uniforms();
    if k_axes > 2 {
        return Err(Error::InvalidParameter(format!(
            "batch depends on {k_axes} uniforms; quadrature supports at most 2"
        )));
    }
    let axes: Vec<Vec<Cell>> = (0..k_axes).map(|k| axis_cells(&breakpoints(pair, k), n)).collect();
    let perms = permutation_tuples(pair)?;
    let perm_prob = 1.0 / perms.len() as f64;
    let counts: Vec<usize> = axes.iter().map(Vec::len).collect();
    let total: usize = counts.iter().product();
    let dt = 2.0 * T_RANGE / (n + n % 2) as f64;
    let cell_size = dt.powi(k_axes as i32) * perm_prob;
    // Evaluation points: the cell centre, then the two ends of each axis with
    // the other axes at their centres.
    let n_eval = 1 + 2 * k_axes;

    let mut bins = vec![0.0; grid.bins()];
    let mut batch = WeightedCubeBatch::default();
    let mut cs = vec![CandidateSet::default(); n_eval];
    let mut f = vec![Vec::new(); n_eval];
    let mut u = Vec::new();
    let mut xi = vec![0.0; k_axes];
    let mut cells = [axes[0][0]; 2];
    for flat in 0..total {
        let mut rest = flat;
        for k in (0..k_axes).rev() {
            cells[k] = axes[k][rest % counts[k]];
            rest /= counts[k];
        }
        for perm in &perms {
            for e in 0..n_eval {
                let (axis, end) = if e == 0 { (usize::MAX, 1) } else { ((e - 1) / 2, 2 * ((e - 1) % 2)) };
                let mut jac = 1.0;
                for k in 0..k_axes {
                    let (t, x) = cells[k].corner(if k == axis { end } else { 1 });
                    xi[k] = x;
                    jac *= cells[k].width * crate::mappings::special::norm_pdf(t);
                }
                design.build(&xi, perm, &mut batch);
                pair.candidates_from_batch(&batch, &mut u, &mut cs[e]);
                match weighting {
                    Weighting::Joint => pair.joint_masses(&cs[e], &mut f[e]),
                    Weighting::Coupling => pair.coupling_probs(&cs[e], &mut f[e]),
                }
                f[e].iter_mut().for_each(|v| *v *= jac);
            }
            for m in 0..f[0].len() {
                let centre = f[0][m];
                let mut mass = centre;
                let mut best = (0usize, -1.0f64);
                for k in 0..k_axes {
                    let (lo, hi) = (f[1 + 2 * k][m], f[2 + 2 * k][m]);
                    mass += (lo - 2.0 * centre + hi) / 6.0;
                    let span = (cs[2 + 2 * k].z_points[m] - cs[1 + 2 * k].z_points[m]).abs();
                    if span > best.1 {
                        best = (k, span);
                    }
                }
                let mass = mass * cell_size;
                if !(mass > 0.0) {
                    continue;
                }
                let z_mid = cs[0].z_points[m];
                let k = best.0;
                let (z_lo, z_hi) = (cs[1 + 2 * k].z_points[m], cs[2 + 2 * k].z_points[m]);
                let (a, b, c) = (f[1 + 2 * k][m], centre, f[2 + 2 * k][m]);
                grid.spread_quadratic(&mut bins, mass, [z_lo, z_mid, z_hi], [a, b, c]);
            }
        }
    }
    Ok(bins)
}

/// Largest relative difference between the binned mass of
/// `E_Q[R(omega) a(z | omega)]` and the bin integrals of `p(z, x)`, over bins
/// holding at least `1e-6` of the target mass.
///
/// `quad_points` is the number of cells per axis piece. The answer is taken
/// from a grid with twice that many; if any qualifying bin moves by more than
/// 10% of its target mass between the two grids the quadrature is reported as
/// non-convergent.
pub fn check_validity(
    pair: &EstimatorCouplingPair,
    target: &Target,
    grid: &ValidityGrid,
    quad_points: usize,
) -> Result<f64> {
    if target.dim() != 1 {
        return Err(Error::InvalidParameter("validity quadrature needs a one-dimensional target".into()));
    }
    if quad_points == 0 {
        return Err(Error::InvalidParameter("quad_points must be positive".into()));
    }
    let p = grid.target_masses(target);
    let p_total: f64 = p.iter().sum();
    let coarse = binned_mass(pair, grid, quad_points, Weighting::Joint)?;
    let fine = binned_mass(pair, grid, 2 * quad_points, Weighting::Joint)?;
    let mut worst = 0.0f64;
    let mut drift = 0.0f64;
    for b in 0..p.len() {
        if p[b] < MIN_BIN_MASS * p_total {
            continue;
        }
        worst = worst.max((fine[b] - p[b]).abs() / p[b]);
        drift = drift.max((fine[b] - coarse[b]).abs() / p[b]);
    }
    if drift > 0.1 {
        return Err(Error::QuadratureNonConvergent(format!(
            "halving the cell size moved a bin by {:.1}% of its mass",
            100.0 * drift
        )));
    }
    Ok(worst)
}

/// Bin masses of the coupled marginal `Q(z) = E_Q[a(z | omega)]`.
pub fn coupled_marginal(pair: &EstimatorCouplingPair, grid: &ValidityGrid, quad_points: usize) -> Result<Vec<f64>> {
    binned_mass(pair, grid, quad_points, Weighting::Coupling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mappings::{CubeMap, GaussianParams};
    use crate::targets::{builtin_target, TargetSpec};

    #[test]
    fn spread_conserves_mass() {
        let g = ValidityGrid::uniform(0.0, 1.0, 4).unwrap();
        let mut bins = vec![0.0; 4];
        assert_eq!(g.spread(&mut bins, 1.0, 0.125, 0.625), 0.0);
        assert_eq!(bins, vec![0.25, 0.5, 0.25, 0.0]);
        let out = g.spread(&mut bins, 1.0, 0.5, 1.5);
        assert!((out - 0.5).abs() < 1e-15);
        assert_eq!(g.spread(&mut bins, 2.0, 3.0, 3.0), 2.0);
        g.spread(&mut bins, 1.0, 0.3, 0.3);
        assert_eq!(bins[1], 1.5);
    }

    #[test]
    fn cells_partition_the_unit_interval() {
        for breaks in [vec![], vec![0.5], vec![0.25, 0.75]] {
            let cells = axis_cells(&breaks, 64);
            let total: f64 = cells.iter().map(|c| c.vol).sum();
            assert!((total - 1.0).abs() < 1e-15, "{total}");
            assert!(cells.iter().all(|c| c.lo <= c.mid && c.mid <= c.hi));
        }
    }

    #[test]
    fn qmc_breakpoints_are_wraps() {
        let target = builtin_target(&TargetSpec::StdGaussian { dim: 1 }).unwrap();
        let map = CubeMap::new(MapKind::Cartesian, 1).unwrap();
        let pair = EstimatorCouplingPair::new(GaussianParams::standard(1), map, target, Method::Qmc, 4).unwrap();
        assert_eq!(breakpoints(&pair, 0), vec![0.25, 0.5, 0.75]);
    }

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(1), vec![vec![0]]);
    }

    #[test]
    fn coupled_marginal_of_base_pair_is_q() {
        let target = builtin_target(&TargetSpec::SkewedMixture1d).unwrap();
        let map = CubeMap::new(MapKind::Cartesian, 1).unwrap();
        let pair = EstimatorCouplingPair::new(GaussianParams::standard(1), map, target, Method::Iid, 1).unwrap();
        let grid = ValidityGrid::uniform(-2.0, 2.0, 4).unwrap();
        let q = coupled_marginal(&pair, &grid, 2000).unwrap();
        let expect = [norm_cdf(-1.0) - norm_cdf(-2.0), norm_cdf(0.0) - norm_cdf(-1.0)];
        assert!((q[0] - expect[0]).abs() < 1e-5 && (q[1] - expect[1]).abs() < 1e-5, "{q:?}");
    }
}
