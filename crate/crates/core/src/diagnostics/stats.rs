//! Small statistical helpers used by the diagnostics and the test suites.

use crate::cube_sampling::RngStream;
use crate::pairwise_sum;

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    (mean, (sample_variance_about(xs, mean) / n).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let mean = pairwise_sum(xs) / xs.len() as f64;
    sample_variance_about(xs, mean)
}

fn sample_variance_about(xs: &[f64], mean: f64) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    pairwise_sum(&sq) / (xs.len() - 1) as f64
}

/// Pearson correlation; NaN when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Kolmogorov distribution tail `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-2.0 * k * k * lambda * lambda).exp();
        s += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

/// Asymptotic p-value of a KS statistic `d` at effective sample size `n`,
/// with the Stephens small-sample correction.
pub fn ks_pvalue(d: f64, n: f64) -> f64 {
    let sn = n.sqrt();
    kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)
}

/// Asymptotic 95% critical value `1.358 / sqrt(n)`.
pub fn ks_critical_95(n: f64) -> f64 {
    1.358_098_8 / n.sqrt()
}

/// One-sample KS statistic of `xs` against `cdf`. Sorts `xs` in place.
pub fn ks_one_sample(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// Two-sample KS statistic. Sorts both inputs in place.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Effective sample size `n m / (n + m)` for a two-sample test.
pub fn ks_two_sample_n(na: usize, nb: usize) -> f64 {
    let (a, b) = (na as f64, nb as f64);
    a * b / (a + b)
}

/// KS statistic between samples and a distribution known only through its
/// CDF at bin edges: compares the empirical CDF at each edge.
pub fn ks_binned(xs: &mut [f64], edges: &[f64], cdf_at_edges: &[f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    edges
        .iter()
        .zip(cdf_at_edges)
        .map(|(&e, &f)| (xs.partition_point(|&x| x <= e) as f64 / n - f).abs())
        .fold(0.0, f64::max)
}

/// Percentile bootstrap confidence interval for the variance.
pub fn bootstrap_variance_ci(xs: &[f64], reps: usize, level: f64, rng: &mut RngStream) -> (f64, f64) {
    let n = xs.len();
    let mut stats: Vec<f64> = (0..reps)
        .map(|_| {
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let x = xs[rng.below(n)];
                s += x;
                s2 += x * x;
            }
            let m = s / n as f64;
            (s2 - n as f64 * m * m) / (n - 1) as f64
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = 0.5 * (1.0 - level);
    let at = |q: f64| stats[((q * reps as f64).floor() as usize).min(reps - 1)];
    (at(alpha), at(1.0 - alpha))
}

/// `Var(a) - Var(b)` for paired samples with a delta-method standard error.
pub fn paired_variance_difference(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = pairwise_sum(a) / n;
    let mb = pairwise_sum(b) / n;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma).powi(2) - (y - mb).powi(2)).collect();
    let (mean, se) = mean_se(&diffs);
    (mean * n / (n - 1.0), se * n / (n - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_se_of_known_values() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pearson_edge_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_nan());
    }

    #[test]
    fn kolmogorov_tail_values() {
        // P(K > 1.358) is 0.05 to four digits.
        assert!((kolmogorov_sf(1.358_098_8) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_sf(1.627_6) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn ks_two_sample_counts_ties_once() {
        let d = ks_two_sample(&mut [1.0, 2.0, 3.0], &mut [1.0, 2.0, 3.0]);
        assert_eq!(d, 0.0);
        let d = ks_two_sample(&mut [0.0, 0.0], &mut [1.0, 1.0]);
        assert_eq!(d, 1.0);
    }

    #[test]
    fn ks_uniform_sample() {
        let mut rng = RngStream::new(8, 0);
        let mut xs: Vec<f64> = (0..10_000).map(|_| rng.uniform()).collect();
        let d = ks_one_sample(&mut xs, |x| x);
        assert!(d < ks_critical_95(10_000.0));
    }
}
