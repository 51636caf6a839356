//! Normal and chi distribution functions.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

use crate::{Error, Result};

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal quantile (Wichura's AS 241, PPND16), accurate to about
/// 1e-16 relative. No domain check; `p` must lie in `(0, 1)`.
pub fn inv_norm_cdf(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r + 6.726_577_092_700_87e4) * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5.226_495_278_852_545e3 * r + 2.872_908_573_572_194_3e4) * r + 3.930_789_580_009_271e4) * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den =
            ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r + 1.519_866_656_361_645_7e-2) * r
                + 1.481_039_764_274_800_8e-1)
                * r
                + 6.897_673_349_851e-1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den =
            ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r + 1.846_318_317_510_054_8e-5) * r
                + 7.868_691_311_456_133e-4)
                * r
                + 1.487_536_129_085_061_5e-2)
                * r
                + 1.369_298_809_227_358e-1)
                * r
                + 5.998_322_065_558_88e-1)
                * r
                + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Checked standard normal quantile.
pub fn gaussian_inv_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::OutOfDomain { what: "probability", value: p });
    }
    Ok(inv_norm_cdf(p))
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 1000;

fn gamma_series(a: f64, x: f64) -> f64 {
    // P(a, x) = x^a e^-x / Gamma(a + 1) * sum_n x^n / ((a + 1) ... (a + n))
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - libm::lgamma(a)).exp()
}

fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
    // Q(a, x) by the modified Lentz method.
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - libm::lgamma(a)).exp() * h
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_continued_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn reg_upper_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_continued_fraction(a, x)
    }
}

/// CDF of the chi distribution with `d` degrees of freedom.
pub fn chi_cdf(r: f64, d: usize) -> f64 {
    reg_lower_gamma(d as f64 / 2.0, 0.5 * r * r)
}

/// Survival function `1 - F(r)` of the chi distribution.
pub fn chi_sf(r: f64, d: usize) -> f64 {
    reg_upper_gamma(d as f64 / 2.0, 0.5 * r * r)
}

pub fn chi_ln_pdf(r: f64, d: usize) -> f64 {
    let k = d as f64;
    (k - 1.0) * r.ln() - 0.5 * r * r - (0.5 * k - 1.0) * LN_2 - libm::lgamma(0.5 * k)
}

/// Inverse chi CDF without domain checks.
pub fn chi_inv_unchecked(p: f64, d: usize) -> f64 {
    match d {
        // |N(0, 1)|: F(r) = 2 Phi(r) - 1.
        1 => -inv_norm_cdf(0.5 * (1.0 - p)),
        // Rayleigh: F(r) = 1 - exp(-r^2 / 2).
        2 => (-2.0 * (-p).ln_1p()).sqrt(),
        _ => chi_inv_newton(p, d),
    }
}

/// Bracketed Newton inversion of the chi CDF through the incomplete gamma
/// function. Works on the upper tail when `p > 1/2` so that `1 - p` is exact.
pub fn chi_inv_newton(p: f64, d: usize) -> f64 {
    let k = d as f64;
    let upper = p > 0.5;
    let target = if upper { 1.0 - p } else { p };
    // Residual whose root is the quantile; increasing in r.
    let residual = |r: f64| if upper { target - chi_sf(r, d) } else { chi_cdf(r, d) - target };

    // Wilson-Hilferty start for chi-square, then square root.
    let z = inv_norm_cdf(p);
    let h = 2.0 / (9.0 * k);
    let wh = k * (1.0 - h + z * h.sqrt()).powi(3);
    let mut r = if wh > 0.0 { wh.sqrt() } else { (k.sqrt() * 0.1).max(1e-3) };

    let mut lo = 0.0;
    let mut hi = r.max(1.0);
    while residual(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..100 {
        let f = residual(r);
        if f == 0.0 {
            return r;
        }
        if f < 0.0 {
            lo = lo.max(r);
        } else {
            hi = hi.min(r);
        }
        let step = f / chi_ln_pdf(r, d).exp();
        let mut next = r - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - r).abs() <= 1e-15 * r.max(1e-300) || hi - lo <= 1e-15 * hi {
            return next;
        }
        r = next;
    }
    r
}

/// Checked inverse chi CDF.
pub fn chi_inv_cdf(p: f64, d: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::OutOfDomain { what: "probability", value: p });
    }
    if d == 0 {
        return Err(Error::InvalidParameter("chi degrees of freedom must be positive".into()));
    }
    Ok(chi_inv_unchecked(p, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// erf by its Maclaurin series, exact enough for |x| <= 4.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        2.0 / PI.sqrt() * sum
    }

    fn phi_series(x: f64) -> f64 {
        0.5 * (1.0 + erf_series(x / 2f64.sqrt()))
    }

    fn bisect(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn inv_cdf_known_values() {
        assert_eq!(gaussian_inv_cdf(0.5).unwrap(), 0.0);
        let oracle = bisect(phi_series, 0.975, 0.0, 4.0);
        assert!((oracle - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((gaussian_inv_cdf(0.975).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn inv_cdf_matches_series_bisection() {
        for i in 1..200 {
            let p = i as f64 / 200.0;
            let oracle = bisect(phi_series, p, -4.0, 4.0);
            assert!((inv_norm_cdf(p) - oracle).abs() < 1e-9, "p={p}");
        }
    }

    #[test]
    fn inv_cdf_is_odd() {
        // Exact on the dyadic grid the RNG draws from, where 1 - p is exact.
        for i in 1..1000u64 {
            let p = (i << 42) as f64 / (1u64 << 53) as f64;
            assert_eq!(inv_norm_cdf(p), -inv_norm_cdf(1.0 - p), "p={p}");
        }
    }

    #[test]
    fn inv_cdf_round_trip_including_tails() {
        let mut ps: Vec<f64> = (1..10_000).map(|i| i as f64 / 10_000.0).collect();
        ps.extend([1e-12, 1e-10, 1e-6, 1.0 - 1e-6, 1.0 - 1e-10, 1.0 - 1e-12]);
        for p in ps {
            let x = inv_norm_cdf(p);
            assert!((norm_cdf(x) - p).abs() <= 1e-9, "p={p}");
        }
        // Deep tails: compare in log space.
        for p in [1e-15, 1e-20, 1e-50, 1e-300] {
            let x = inv_norm_cdf(p);
            let back = norm_cdf(x);
            assert!(((back / p) - 1.0).abs() < 1e-9, "p={p} back={back}");
        }
    }

    #[test]
    fn domain_errors() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(gaussian_inv_cdf(p).is_err());
            assert!(chi_inv_cdf(p, 3).is_err());
        }
        assert!(chi_inv_cdf(0.5, 0).is_err());
    }

    #[test]
    fn incomplete_gamma_exponential_case() {
        // P(1, x) = 1 - e^-x
        for x in [0.01, 0.5, 1.0, 2.0, 5.0, 30.0] {
            assert!((reg_lower_gamma(1.0, x) - (1.0 - (-x).exp())).abs() < 1e-14);
            assert!((reg_upper_gamma(1.0, x) - (-x).exp()).abs() < 1e-14 * (-x).exp().max(1e-300) + 1e-300);
        }
        // P(1/2, x) = erf(sqrt x)
        for x in [0.1, 1.0, 3.0, 8.0] {
            assert!((reg_lower_gamma(0.5, x) - erf_series(f64::sqrt(x))).abs() < 1e-13);
        }
    }

    #[test]
    fn chi_two_analytic_inverse() {
        let p = 1.0 - (-0.5f64).exp();
        assert!((chi_inv_cdf(p, 2).unwrap() - 1.0).abs() < 1e-12);
        assert!((chi_inv_newton(p, 2) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn chi_one_is_half_normal() {
        let p = 2.0 * phi_series(1.0) - 1.0;
        assert!((p - 0.682_689_492_137_086).abs() < 1e-12);
        assert!((chi_inv_cdf(p, 1).unwrap() - 1.0).abs() < 1e-9);
        assert!((chi_inv_newton(p, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn chi_newton_round_trip() {
        for d in [1, 2, 3, 4, 7, 20, 64] {
            let mut prev = 0.0;
            for i in 1..400 {
                let p = i as f64 / 400.0;
                let r = chi_inv_unchecked(p, d);
                assert!(r > prev, "monotone d={d} p={p}");
                prev = r;
                assert!((chi_cdf(r, d) - p).abs() < 1e-9, "d={d} p={p}");
                if d <= 2 {
                    assert!((chi_inv_newton(p, d) - r).abs() < 1e-9);
                }
            }
            for p in [1e-12, 1e-8, 1.0 - 1e-8, 1.0 - 1e-12] {
                let r = chi_inv_unchecked(p, d);
                let back = if p > 0.5 { 1.0 - chi_sf(r, d) } else { chi_cdf(r, d) };
                assert!((back - p).abs() < 1e-9, "d={d} p={p}");
            }
        }
    }
}
