//! The experiment grid: Laplace initialization, optimization on a fixed bank,
//! then gap, divergence and moment diagnostics on fresh randomness.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use dc_core::cube_sampling::mix_seed;
use dc_core::diagnostics::{self, gap_report, moment_error_from_samples, KlGrid, SweepCorrelation, SweepRecord};
use dc_core::objective::{elbo_with_se, laplace_init, optimize, SampleBank};
use dc_core::targets::{builtin_target, grid_quadrature, moment_oracle, MomentSource};
use dc_core::{
    CubeMap, Error, EstimatorCouplingPair, GaussianParams, MapKind, Method, MomentOracle, RngStream, Target, TargetSpec,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const RESULTS_HEADER: [&str; 15] = [
    "target",
    "method",
    "map",
    "M",
    "seed",
    "final_elbo",
    "elbo_se",
    "gap",
    "kl_z",
    "kl_z_se",
    "mean_err",
    "cov_err",
    "iterations",
    "converged",
    "error",
];

/// Purposes of the per-cell random streams.
const STREAM_BANK: u64 = 1 << 48;
const STREAM_EVAL: u64 = 2 << 48;
const STREAM_KL: u64 = 3 << 48;
const STREAM_MOMENTS: u64 = 4 << 48;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub target: usize,
    pub method: Method,
    pub map: MapKind,
    pub m: usize,
    pub seed: u64,
}

/// Every cell of the grid, in output order. An `iid`, `M = 1` baseline is
/// added for each (target, map, seed).
pub fn cells(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<Cell> {
    let mut out = Vec::new();
    for target in 0..cfg.targets.len() {
        for &map in &cfg.maps {
            for &seed in seeds {
                out.push(Cell { target, method: Method::Iid, map, m: 1, seed });
                for &method in &cfg.methods {
                    for &m in &cfg.m_values {
                        if method == Method::Iid && m == 1 {
                            continue;
                        }
                        out.push(Cell { target, method, map, m, seed });
                    }
                }
            }
        }
    }
    out
}

/// Everything about a target that the cells share.
pub struct PreparedTarget {
    pub spec: TargetSpec,
    pub label: String,
    pub target: Target,
    pub oracle: MomentOracle,
    pub grid: Option<KlGrid>,
    pub init: GaussianParams,
}

pub fn prepare_target(spec: &TargetSpec, oracle_budget: usize) -> dc_core::Result<PreparedTarget> {
    let mut target = builtin_target(spec)?;
    let gridded = target.dim() <= 2 && target.bounds().is_some();
    let oracle = if gridded && (target.log_normalizer().is_none() || target.analytic_moments().is_none()) {
        let g = grid_quadrature(&target)?;
        if target.log_normalizer().is_none() {
            target = target.with_log_normalizer(g.log_normalizer);
        }
        match target.analytic_moments() {
            Some(m) => m.clone(),
            None => MomentOracle::new(g.mean, g.cov, MomentSource::GridQuadrature)?,
        }
    } else {
        moment_oracle(&target, oracle_budget)?
    };
    let grid = if target.dim() <= 2 { Some(KlGrid::around(&oracle)?) } else { None };
    let init = laplace_init(&target)?;
    Ok(PreparedTarget { spec: spec.clone(), label: spec.label(), target, oracle, grid, init })
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of a cell: depends on its tags only, never on its position in the grid.
pub fn cell_seed(label: &str, cell: &Cell) -> u64 {
    mix_seed(cell.seed, fnv1a(&format!("{label}|{}|{}|{}", cell.method, cell.map, cell.m)))
}

pub struct CellOutput {
    pub record: SweepRecord,
    pub samples: Vec<f64>,
    pub wall_time_ms: u64,
}

fn empty_record(label: &str, cell: &Cell) -> SweepRecord {
    SweepRecord {
        target: label.to_string(),
        method: cell.method,
        map: cell.map,
        m: cell.m,
        seed: cell.seed,
        final_elbo: None,
        elbo_se: None,
        gap: None,
        kl_z: None,
        kl_z_se: None,
        mean_err: None,
        cov_err: None,
        iterations: None,
        converged: None,
        error: None,
        wall_time_ms: 0,
    }
}

fn run_cell_inner(p: &PreparedTarget, cell: &Cell, cfg: &ExperimentConfig) -> dc_core::Result<(SweepRecord, Vec<f64>)> {
    let d = p.target.dim();
    let base = cell_seed(&p.label, cell);
    let map = CubeMap::new(cell.map, d)?;
    let bank = SampleBank::new(cell.method, cell.m, map, cfg.bank_size, &RngStream::new(base, STREAM_BANK))?;
    let opt = optimize(&p.target, &bank, &p.init, &cfg.optimizer)?;
    let pair = EstimatorCouplingPair::new(opt.theta_star.clone(), map, p.target.clone(), cell.method, cell.m)?;
    let eval = SampleBank::new(cell.method, cell.m, map, cfg.eval_bank_size, &RngStream::new(base, STREAM_EVAL))?;

    let mut rec = empty_record(&p.label, cell);
    rec.iterations = Some(opt.iterations);
    rec.converged = Some(opt.converged);
    if p.target.log_normalizer().is_some() {
        let kl_rng = RngStream::new(base, STREAM_KL);
        let report = match gap_report(&pair, &p.target, &eval, p.grid.as_ref(), cfg.kl_draws, &kl_rng) {
            Err(Error::GridCoverage { .. }) => gap_report(&pair, &p.target, &eval, None, cfg.kl_draws, &kl_rng)?,
            r => r?,
        };
        rec.final_elbo = Some(report.elbo_hat);
        rec.elbo_se = Some(report.elbo_se);
        rec.gap = Some(report.gap);
        rec.kl_z = report.kl_z_hat;
        rec.kl_z_se = report.kl_z_se;
    } else {
        let (e, se) = elbo_with_se(pair.theta(), &eval, &p.target)?;
        rec.final_elbo = Some(e);
        rec.elbo_se = Some(se);
    }
    let (samples, _) = diagnostics::coupled_samples(&pair, cfg.moment_samples, &RngStream::new(base, STREAM_MOMENTS))?;
    let me = moment_error_from_samples(&samples, d, &p.oracle);
    rec.mean_err = Some(me.mean_err);
    rec.cov_err = Some(me.cov_err);
    let keep = cfg.samples_per_cell.min(me.n_samples) * d;
    Ok((rec, samples[..keep].to_vec()))
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Runs one cell; failures and panics end up in the record's error field.
pub fn run_cell(p: Result<&PreparedTarget, &str>, label: &str, cell: &Cell, cfg: &ExperimentConfig) -> CellOutput {
    let start = Instant::now();
    let outcome = match p {
        Err(e) => Err(e.to_string()),
        Ok(p) => match catch_unwind(AssertUnwindSafe(|| run_cell_inner(p, cell, cfg))) {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(e)) => Err(e.to_string()),
            Err(panic) => Err(format!("panic: {}", panic_message(panic))),
        },
    };
    let (mut record, samples) = outcome.unwrap_or_else(|e| {
        let mut r = empty_record(label, cell);
        r.error = Some(e);
        (r, Vec::new())
    });
    let wall_time_ms = start.elapsed().as_millis() as u64;
    record.wall_time_ms = wall_time_ms;
    CellOutput { record, samples, wall_time_ms }
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

pub fn results_row(r: &SweepRecord) -> Vec<String> {
    vec![
        r.target.clone(),
        r.method.to_string(),
        r.map.to_string(),
        r.m.to_string(),
        r.seed.to_string(),
        fmt_opt(&r.final_elbo),
        fmt_opt(&r.elbo_se),
        fmt_opt(&r.gap),
        fmt_opt(&r.kl_z),
        fmt_opt(&r.kl_z_se),
        fmt_opt(&r.mean_err),
        fmt_opt(&r.cov_err),
        fmt_opt(&r.iterations),
        fmt_opt(&r.converged),
        r.error.clone().unwrap_or_default(),
    ]
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

pub fn write_results(path: &Path, records: &[SweepRecord]) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in records {
        w.write_record(results_row(r))?;
    }
    w.flush()?;
    Ok(())
}

/// File-name-safe identifier of a cell.
pub fn cell_name(label: &str, cell: &Cell) -> String {
    let t: String = label.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    format!("{}_{}_{}_M{}_s{}", t.trim_end_matches('_'), cell.method, cell.map, cell.m, cell.seed)
}

fn write_samples(path: &Path, samples: &[f64], d: usize) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record((0..d).map(|j| format!("z{j}")))?;
    for z in samples.chunks_exact(d) {
        w.write_record(z.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum CorrelationEntry {
    Ok(SweepCorrelation),
    Failed { error: String },
}

impl From<dc_core::Result<SweepCorrelation>> for CorrelationEntry {
    fn from(r: dc_core::Result<SweepCorrelation>) -> Self {
        match r {
            Ok(c) => CorrelationEntry::Ok(c),
            Err(e) => CorrelationEntry::Failed { error: e.to_string() },
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub cells: usize,
    pub failed_cells: usize,
    /// Improvements from every target pooled together.
    pub pooled: CorrelationEntry,
    pub per_target: BTreeMap<String, CorrelationEntry>,
}

pub fn summarize(labels: &[String], records: &[SweepRecord]) -> Summary {
    let per_target = labels
        .iter()
        .map(|l| {
            let mine: Vec<SweepRecord> = records.iter().filter(|r| &r.target == l).cloned().collect();
            (l.clone(), diagnostics::sweep_correlation(&mine).into())
        })
        .collect();
    Summary {
        cells: records.len(),
        failed_cells: records.iter().filter(|r| r.error.is_some()).count(),
        pooled: diagnostics::sweep_correlation(records).into(),
        per_target,
    }
}

/// Runs the whole grid and writes `results.csv`, `summary.json`,
/// `timings.csv` and the per-cell sample files into `out`.
pub fn run_sweep(cfg: &ExperimentConfig, seeds: &[u64], out: &Path, jobs: Option<usize>) -> anyhow::Result<Summary> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let probe = out.join("results.csv");
    fs::File::create(&probe).with_context(|| format!("output directory {} is not writable", out.display()))?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build()?;

    let labels: Vec<String> = cfg.targets.iter().map(|t| t.0.label()).collect();
    let prepared: Vec<Result<PreparedTarget, String>> = pool.install(|| {
        cfg.targets
            .par_iter()
            .map(|t| prepare_target(&t.0, cfg.oracle_budget).map_err(|e| format!("target setup failed: {e}")))
            .collect()
    });
    let grid = cells(cfg, seeds);
    let total = grid.len();
    let outputs: Vec<CellOutput> = pool.install(|| {
        grid.par_iter()
            .enumerate()
            .map(|(i, cell)| {
                let label = &labels[cell.target];
                let p = prepared[cell.target].as_ref().map_err(String::as_str);
                let o = run_cell(p, label, cell, cfg);
                eprintln!(
                    "[{}/{total}] {} {:.1}s{}",
                    i + 1,
                    cell_name(label, cell),
                    o.wall_time_ms as f64 / 1e3,
                    o.record.error.as_ref().map(|e| format!(" error: {e}")).unwrap_or_default()
                );
                o
            })
            .collect()
    });

    let records: Vec<SweepRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    write_results(&probe, &records)?;

    let mut timings = csv_writer(&out.join("timings.csv"))?;
    timings.write_record(["cell", "wall_time_ms"])?;
    for (cell, o) in grid.iter().zip(&outputs) {
        timings.write_record([cell_name(&labels[cell.target], cell), o.wall_time_ms.to_string()])?;
        if cfg.samples_per_cell > 0 && !o.samples.is_empty() {
            let d = prepared[cell.target].as_ref().map(|p| p.target.dim()).unwrap_or(1);
            let name = format!("samples_{}.csv", cell_name(&labels[cell.target], cell));
            write_samples(&out.join(name), &o.samples, d)?;
        }
    }
    timings.flush()?;

    let summary = summarize(&labels, &records);
    let mut f = fs::File::create(out.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    Ok(summary)
}
