//! Monte Carlo checks at moderate sample sizes. Every test uses fixed seeds.

use dc_core::diagnostics::stats::{ks_binned, ks_critical_95, ks_two_sample, mean_se};
use dc_core::diagnostics::{coupled_samples, gap_report, moment_error, KlGrid};
use dc_core::estimator::{coupled_marginal, PairScratch, ValidityGrid};
use dc_core::objective::{elbo_with_se, SampleBank};
use dc_core::targets::{builtin_target, grid_quadrature, importance_sampling_oracle, skewed_mixture_1d};
use dc_core::{CubeMap, Error, EstimatorCouplingPair, GaussianParams, MapKind, Method, RngStream, Target};

fn target(label: &str) -> Target {
    builtin_target(&label.parse().unwrap()).unwrap()
}

fn pair(t: &Target, theta: GaussianParams, kind: MapKind, method: Method, m: usize) -> EstimatorCouplingPair {
    EstimatorCouplingPair::new(theta, CubeMap::new(kind, t.dim()).unwrap(), t.clone(), method, m).unwrap()
}

fn log_r(p: &EstimatorCouplingPair, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, 0);
    let mut scratch = PairScratch::default();
    (0..n).map(|_| p.sample_log_r(&mut rng, &mut scratch)).collect()
}

#[test]
fn mean_of_r_is_one_and_mean_log_r_is_below_zero() {
    let t = target("skewed_mixture_1d");
    let theta = GaussianParams::diagonal(vec![-0.5], &[2.5]);
    for (i, (method, m)) in
        [(Method::Iid, 3), (Method::Anti, 2), (Method::Qmc, 4), (Method::Lhs, 5)].into_iter().enumerate()
    {
        let p = pair(&t, theta.clone(), MapKind::Cartesian, method, m);
        let lr = log_r(&p, 200_000, 10 + i as u64);
        let r: Vec<f64> = lr.iter().map(|x| x.exp()).collect();
        let (mean, se) = mean_se(&r);
        assert!((mean - 1.0).abs() < 3.0 * se, "{method} M={m}: {mean} +- {se}");
        let (elbo, se) = mean_se(&lr);
        assert!(elbo <= 3.0 * se, "{method}: {elbo}");
    }
}

#[test]
fn averaging_never_loosens_the_bound() {
    let t = target("skewed_mixture_1d");
    let theta = GaussianParams::diagonal(vec![-0.5], &[2.0]);
    let map = CubeMap::new(MapKind::Cartesian, 1).unwrap();
    let b1 = SampleBank::new(Method::Iid, 1, map, 1 << 18, &RngStream::new(3, 1)).unwrap();
    let b8 = SampleBank::new(Method::Iid, 8, map, 1 << 16, &RngStream::new(3, 2)).unwrap();
    let (e1, s1) = elbo_with_se(&theta, &b1, &t).unwrap();
    let (e8, s8) = elbo_with_se(&theta, &b8, &t).unwrap();
    assert!(e8 >= e1 - 3.0 * (s1 * s1 + s8 * s8).sqrt(), "{e8} vs {e1}");
}

#[test]
fn coupled_samples_agree_with_the_quadrature_marginal() {
    let t = target("skewed_mixture_1d");
    let theta = GaussianParams::diagonal(vec![-0.5], &[2.2]);
    let p = pair(&t, theta, MapKind::Cartesian, Method::Anti, 2);
    let grid = ValidityGrid::uniform(-9.0, 7.0, 64).unwrap();
    let q = coupled_marginal(&p, &grid, 200).unwrap();
    let mut cdf = vec![0.0];
    for m in &q {
        cdf.push(cdf.last().unwrap() + m);
    }
    let n = 20_000;
    let (mut a, _) = coupled_samples(&p, n, &RngStream::new(21, 0)).unwrap();
    let (mut b, _) = coupled_samples(&p, n, &RngStream::new(22, 0)).unwrap();
    let d = ks_binned(&mut a, grid.edges(), &cdf);
    assert!(d < ks_critical_95(n as f64), "binned KS {d}");
    let d2 = ks_two_sample(&mut a, &mut b);
    assert!(d2 < ks_critical_95(n as f64 / 2.0), "two-sample KS {d2}");
}

#[test]
fn exact_posterior_has_no_gap_and_no_divergence() {
    let t = target("gaussian(0.7,2.25)");
    let theta = GaussianParams::new(vec![0.7], vec![1.5]).unwrap();
    let p = pair(&t, theta, MapKind::Cartesian, Method::Iid, 1);
    let bank =
        SampleBank::new(Method::Iid, 1, CubeMap::new(MapKind::Cartesian, 1).unwrap(), 4096, &RngStream::new(4, 0))
            .unwrap();
    let grid = KlGrid::around(t.analytic_moments().unwrap()).unwrap();
    let r = gap_report(&p, &t, &bank, Some(&grid), 200_000, &RngStream::new(4, 1)).unwrap();
    assert!(r.gap.abs() < 1e-12, "{r:?}");
    let kl = r.kl_z_hat.unwrap();
    assert!(kl < 2e-3 && kl >= 0.0 - 3.0 * r.kl_z_se.unwrap(), "{r:?}");
    assert!(r.coverage.unwrap() > 0.999);
}

#[test]
fn halved_sigma_gives_the_closed_form_covariance_error() {
    let t = target("gaussian(0,1)");
    let theta = GaussianParams::new(vec![0.0], vec![0.5]).unwrap();
    let p = pair(&t, theta, MapKind::Cartesian, Method::Iid, 1);
    let me = moment_error(&p, t.analytic_moments().unwrap(), 100_000, &RngStream::new(6, 0)).unwrap();
    assert!((me.cov_err - 0.5625).abs() < 0.005, "{me:?}");
    assert!(me.mean_err < 1e-4);
    assert!(moment_error(&p, t.analytic_moments().unwrap(), 50, &RngStream::new(6, 0)).is_err());
}

#[test]
fn moment_error_shrinks_with_more_samples_at_the_exact_posterior() {
    let t = target("gaussian(0,1)");
    let p = pair(&t, GaussianParams::standard(1), MapKind::Cartesian, Method::Iid, 1);
    let oracle = t.analytic_moments().unwrap();
    let avg = |n: usize| -> f64 {
        (0..20).map(|s| moment_error(&p, oracle, n, &RngStream::new(40 + s, 0)).unwrap().cov_err).sum::<f64>() / 20.0
    };
    let (small, large) = (avg(1_000), avg(16_000));
    assert!(large < small / 4.0, "{small} vs {large}");
}

#[test]
fn grid_coverage_is_enforced() {
    let t = target("skewed_mixture_1d");
    let p = pair(&t, GaussianParams::standard(1), MapKind::Cartesian, Method::Iid, 1);
    let bank = SampleBank::new(Method::Iid, 1, CubeMap::new(MapKind::Cartesian, 1).unwrap(), 64, &RngStream::new(1, 0))
        .unwrap();
    let narrow = KlGrid::new(vec![-1.0], vec![1.0], vec![40]).unwrap();
    let err = gap_report(&p, &t, &bank, Some(&narrow), 1000, &RngStream::new(1, 1)).unwrap_err();
    assert!(matches!(err, Error::GridCoverage { .. }));
}

#[test]
fn funnel_importance_sampling_agrees_with_quadrature() {
    let t = target("funnel(2)");
    let g = grid_quadrature(&t).unwrap();
    let is = importance_sampling_oracle(&t, t.reference().unwrap(), 10_000_000, &RngStream::new(9, 0)).unwrap();
    let sd: Vec<f64> = [g.cov[0], g.cov[3]].iter().map(|v| v.sqrt()).collect();
    for (i, s) in sd.iter().enumerate() {
        assert!((is.mean[i] - g.mean[i]).abs() < 0.01 * s, "mean {i}: {} vs {}", is.mean[i], g.mean[i]);
    }
    for k in [0, 3] {
        assert!((is.cov[k] / g.cov[k] - 1.0).abs() < 0.03, "cov {k}: {} vs {}", is.cov[k], g.cov[k]);
    }
}

#[test]
fn skewed_mixture_quadrature_matches_closed_form() {
    let t = target("skewed_mixture_1d");
    let g = grid_quadrature(&t).unwrap();
    let (mean, var) = skewed_mixture_1d().moments();
    assert!(g.log_normalizer.abs() < 1e-9);
    assert!((g.mean[0] - mean).abs() < 1e-8 && (g.cov[0] - var).abs() < 1e-8);
}
