//! Deterministic first-order maximizers of the banked objective.

use serde::{Deserialize, Serialize};

use super::{elbo_gradient, first_non_finite, raw_gradient, raw_to_theta, theta_to_raw, SampleBank};
use crate::mappings::GaussianParams;
use crate::targets::Target;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Lbfgs,
}

fn d_step() -> f64 {
    0.02
}
fn d_iters() -> usize {
    2000
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_memory() -> usize {
    10
}
fn d_grad_tol() -> f64 {
    1e-6
}
fn d_kind() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_kind")]
    pub optimizer: OptimizerKind,
    /// Adam learning rate; ignored by L-BFGS.
    #[serde(default = "d_step")]
    pub step: f64,
    #[serde(default = "d_iters")]
    pub iters: usize,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// L-BFGS history length.
    #[serde(default = "d_memory")]
    pub memory: usize,
    #[serde(default = "d_grad_tol")]
    pub grad_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            optimizer: d_kind(),
            step: d_step(),
            iters: d_iters(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            memory: d_memory(),
            grad_tol: d_grad_tol(),
        }
    }
}

impl OptimizerConfig {
    pub fn lbfgs() -> Self {
        Self { optimizer: OptimizerKind::Lbfgs, iters: 200, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("optimizer {what}")));
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be positive");
        }
        if self.iters == 0 {
            return bad("iters must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.grad_tol >= 0.0) {
            return bad("eps and grad_tol must be positive");
        }
        if self.memory == 0 {
            return bad("memory must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptResult {
    pub theta_star: GaussianParams,
    /// Objective at the start of each iteration, then at the returned point.
    pub elbo_trace: Vec<f64>,
    pub final_elbo: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Objective and raw-coordinate gradient; `None` when `x` is not a valid
/// parameter or the objective is not finite.
struct Problem<'a> {
    bank: &'a SampleBank,
    target: &'a Target,
    d: usize,
}

impl Problem<'_> {
    fn eval(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let theta = raw_to_theta(x, self.d).ok()?;
        let g = elbo_gradient(&theta, self.bank, self.target).ok()?;
        if !g.value.is_finite() {
            return None;
        }
        let raw = raw_gradient(&theta, &g);
        raw.iter().all(|v| v.is_finite()).then_some((g.value, raw))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn plateaued(trace: &[f64]) -> bool {
    if trace.len() < 11 {
        return false;
    }
    let last = trace[trace.len() - 1];
    let back = trace[trace.len() - 11];
    (last - back).abs() <= 1e-9 * last.abs().max(1e-12)
}

/// Maximizes the empirical objective from `init`.
///
/// The result is a pure function of the inputs: the bank is fixed and every
/// reduction runs over fixed chunks.
pub fn optimize(target: &Target, bank: &SampleBank, init: &GaussianParams, cfg: &OptimizerConfig) -> Result<OptResult> {
    cfg.validate()?;
    if let Some(batch) = first_non_finite(init, bank, target)? {
        return Err(Error::NonFiniteObjective { batch });
    }
    let problem = Problem { bank, target, d: init.dim() };
    let x0 = theta_to_raw(init);
    let (x, trace, iterations, converged) = match cfg.optimizer {
        OptimizerKind::Adam => adam(&problem, x0, cfg)?,
        OptimizerKind::Lbfgs => lbfgs(&problem, x0, cfg)?,
    };
    let theta_star = raw_to_theta(&x, init.dim())?;
    let final_elbo = *trace.last().expect("trace holds the initial value");
    Ok(OptResult { theta_star, elbo_trace: trace, final_elbo, iterations, converged })
}

type Outcome = (Vec<f64>, Vec<f64>, usize, bool);

fn adam(p: &Problem, mut x: Vec<f64>, cfg: &OptimizerConfig) -> Result<Outcome> {
    let n = x.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (mut f, mut g) = p.eval(&x).ok_or(Error::NonFiniteObjective { batch: 0 })?;
    let mut trace = vec![f];
    // Best point seen, returned if a late step lands somewhere non-finite.
    let mut best = (f, x.clone());
    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=cfg.iters {
        if norm(&g) < cfg.grad_tol {
            converged = true;
            break;
        }
        iterations = t;
        let b1t = 1.0 - cfg.beta1.powi(t as i32);
        let b2t = 1.0 - cfg.beta2.powi(t as i32);
        let mut trial = x.clone();
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            trial[i] += cfg.step * (m[i] / b1t) / ((v[i] / b2t).sqrt() + cfg.eps);
        }
        match p.eval(&trial) {
            Some((f_new, g_new)) => {
                x = trial;
                f = f_new;
                g = g_new;
            }
            None => break,
        }
        trace.push(f);
        if f > best.0 {
            best = (f, x.clone());
        }
        if t == cfg.iters && plateaued(&trace) {
            converged = true;
        }
    }
    if !f.is_finite() || f < best.0 && !converged {
        x = best.1;
        trace.push(best.0);
    }
    Ok((x, trace, iterations, converged))
}

/// L-BFGS on `-f` with a strong Wolfe line search.
fn lbfgs(p: &Problem, mut x: Vec<f64>, cfg: &OptimizerConfig) -> Result<Outcome> {
    let (mut f, mut g) = p.eval(&x).ok_or(Error::NonFiniteObjective { batch: 0 })?;
    let mut trace = vec![f];
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.iters {
        if norm(&g) < cfg.grad_tol {
            converged = true;
            break;
        }
        iterations = it;
        // Ascent direction from the two-loop recursion applied to the gradient of f.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist.back().map(|(s, y, _)| dot(s, y) / dot(y, y)).unwrap_or(1.0 / norm(&g).max(1.0));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir = q;
        if dot(&dir, &g) <= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| v / norm(&g).max(1.0)).collect();
        }
        let Some((step, f_new, g_new)) = wolfe_search(p, &x, f, &g, &dir) else {
            if hist.is_empty() {
                break;
            }
            hist.clear();
            continue;
        };
        let s: Vec<f64> = dir.iter().map(|d| step * d).collect();
        // Curvature pair for the minimization of -f.
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        f = f_new;
        g = g_new;
        trace.push(f);
        if sy > 1e-12 {
            if hist.len() == cfg.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        if plateaued(&trace) {
            converged = true;
            break;
        }
    }
    Ok((x, trace, iterations, converged))
}

/// Strong Wolfe conditions for maximizing `f` along `dir`
/// (`c1 = 1e-4`, `c2 = 0.9`), bracketing then zooming by bisection with a
/// safeguarded cubic step.
fn wolfe_search(p: &Problem, x: &[f64], f0: f64, g0: &[f64], dir: &[f64]) -> Option<(f64, f64, Vec<f64>)> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let d0 = dot(g0, dir);
    let at = |a: f64| -> Option<(f64, Vec<f64>, f64)> {
        let xt: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + a * di).collect();
        let (f, g) = p.eval(&xt)?;
        let d = dot(&g, dir);
        Some((f, g, d))
    };
    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut d_prev = d0;
    let mut a = 1.0;
    for _ in 0..30 {
        let Some((f, g, d)) = at(a) else {
            // Out of the finite region: shrink towards the last good point.
            a = 0.5 * (a_prev + a);
            continue;
        };
        if f < f0 + C1 * a * d0 || (f <= f_prev && a_prev > 0.0) {
            return zoom(&at, f0, d0, (a_prev, f_prev, d_prev), (a, f));
        }
        if d.abs() <= C2 * d0.abs() {
            return Some((a, f, g));
        }
        if d <= 0.0 {
            return zoom(&at, f0, d0, (a, f, d), (a_prev, f_prev));
        }
        a_prev = a;
        f_prev = f;
        d_prev = d;
        a *= 2.0;
    }
    None
}

type LineEval<'a> = dyn Fn(f64) -> Option<(f64, Vec<f64>, f64)> + 'a;

fn zoom(at: &LineEval, f0: f64, d0: f64, lo: (f64, f64, f64), hi: (f64, f64)) -> Option<(f64, f64, Vec<f64>)> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let (mut a_lo, mut f_lo, mut d_lo) = lo;
    let (mut a_hi, mut f_hi) = hi;
    for _ in 0..40 {
        // Quadratic interpolation from (a_lo, f_lo, d_lo) and (a_hi, f_hi), kept inside the bracket.
        let w = a_hi - a_lo;
        let denom = 2.0 * (f_hi - f_lo - d_lo * w);
        let mut a = if denom != 0.0 { a_lo - d_lo * w * w / denom } else { f64::NAN };
        let (lo_b, hi_b) = (a_lo.min(a_hi), a_lo.max(a_hi));
        let margin = 0.1 * (hi_b - lo_b);
        if !(a > lo_b + margin && a < hi_b - margin) {
            a = 0.5 * (a_lo + a_hi);
        }
        let Some((f, g, d)) = at(a) else {
            a_hi = a;
            f_hi = f64::NEG_INFINITY;
            continue;
        };
        if f < f0 + C1 * a * d0 || f <= f_lo {
            a_hi = a;
            f_hi = f;
        } else {
            if d.abs() <= C2 * d0.abs() {
                return Some((a, f, g));
            }
            if d * (a_hi - a_lo) <= 0.0 {
                a_hi = a_lo;
                f_hi = f_lo;
            }
            a_lo = a;
            f_lo = f;
            d_lo = d;
        }
        if (a_hi - a_lo).abs() < 1e-14 * a_lo.abs().max(1.0) {
            break;
        }
    }
    // Accept the best point with sufficient increase even without curvature.
    if a_lo > 0.0 && f_lo > f0 {
        let (f, g, _) = at(a_lo)?;
        return Some((a_lo, f, g));
    }
    None
}
