//! Quadrature check of estimator-coupling validity for 1D targets.

use dc_core::estimator::{base_pair, check_validity, ValidityGrid};
use dc_core::objective::laplace_init;
use dc_core::targets::builtin_target;
use dc_core::{CubeMap, EstimatorCouplingPair, GaussianParams, MapKind, Method, TargetSpec};

pub const VALIDITY_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct ValidateOptions {
    pub target: TargetSpec,
    pub methods: Vec<Method>,
    pub m: usize,
    pub maps: Vec<MapKind>,
    pub quad_points: usize,
    /// Also run every cell with its selection order reversed, as a negative
    /// control that should fail.
    pub corrupt: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidityRow {
    pub label: String,
    pub corrupted: bool,
    pub outcome: Result<f64, String>,
}

impl ValidityRow {
    pub fn passed(&self) -> bool {
        matches!(self.outcome, Ok(e) if e <= VALIDITY_TOL)
    }
}

/// The Laplace approximation widened by half, so the check is not helped by
/// an accidental exact match.
fn default_theta(target: &dc_core::Target) -> anyhow::Result<GaussianParams> {
    let fit = laplace_init(target)?;
    Ok(GaussianParams::diagonal(fit.mu().to_vec(), &[1.5 * fit.scale()[0]]))
}

pub fn run_validate(opts: &ValidateOptions) -> anyhow::Result<Vec<ValidityRow>> {
    let target = builtin_target(&opts.target)?;
    if target.dim() != 1 {
        anyhow::bail!("validate needs a one-dimensional target, `{}` has dimension {}", opts.target, target.dim());
    }
    let (lo, hi) = target.bounds().map(|b| b[0]).unwrap_or((-10.0, 10.0));
    let grid = ValidityGrid::uniform(lo, hi, 64)?;
    let theta = default_theta(&target)?;
    let mut rows = Vec::new();
    let mut check = |label: String, pair: &EstimatorCouplingPair, corrupted: bool| {
        let outcome = check_validity(pair, &target, &grid, opts.quad_points).map_err(|e| e.to_string());
        rows.push(ValidityRow { label, corrupted, outcome });
    };
    let base = base_pair(theta.clone(), CubeMap::new(MapKind::Cartesian, 1)?, target.clone())?;
    check("base".into(), &base, false);
    for &map in &opts.maps {
        for &method in &opts.methods {
            let pair =
                EstimatorCouplingPair::new(theta.clone(), CubeMap::new(map, 1)?, target.clone(), method, opts.m)?;
            let label = format!("{method} M={} {map}", opts.m);
            if pair.design().n_uniforms() > 2 {
                eprintln!(
                    "skipping {label}: {} raw uniforms per batch, quadrature handles at most 2",
                    pair.design().n_uniforms()
                );
                continue;
            }
            check(label.clone(), &pair, false);
            if opts.corrupt && pair.design().batch_len() > 1 {
                check(format!("{label} (corrupted)"), &pair.corrupt_selection(), true);
            }
        }
    }
    Ok(rows)
}

pub fn print_rows(rows: &[ValidityRow]) {
    println!("{:<36} {:>14}  result", "pair", "max rel err");
    for r in rows {
        let err = match &r.outcome {
            Ok(e) => format!("{e:.3e}"),
            Err(e) => e.clone(),
        };
        let verdict = match (r.corrupted, r.passed()) {
            (_, true) => "PASS",
            (false, false) => "FAIL",
            (true, false) => "FAIL (expected)",
        };
        println!("{:<36} {:>14}  {verdict}", r.label, err);
    }
}
