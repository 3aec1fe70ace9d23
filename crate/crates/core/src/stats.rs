//! Binomial tests and bounds, and the standard normal quantile.

use crate::error::{Error, Result};

/// Standard normal CDF `Φ(x)`.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile `Φ⁻¹(p)`.
///
/// Acklam's rational approximation (relative error about 1.15e-9), polished
/// by one Halley step against the erfc-based CDF.
pub fn inv_norm_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain {
            value: p,
            domain: "(0, 1)",
        });
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };

    let e = norm_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    Ok(x - u / (1.0 + x * u / 2.0))
}

fn ln_choose(n: u64, k: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// `ln P(Bin(n, q) = k)` for every `k ∈ 0..=n`.
fn ln_pmf_table(n: u64, q: f64) -> Vec<f64> {
    let (lq, lr) = (q.ln(), (1.0 - q).ln());
    (0..=n)
        .map(|k| {
            let kf = k as f64;
            let nk = (n - k) as f64;
            // 0·ln 0 = 0 at the endpoints
            let a = if k == 0 { 0.0 } else { kf * lq };
            let b = if k == n { 0.0 } else { nk * lr };
            ln_choose(n, k) + a + b
        })
        .collect()
}

pub fn binom_pmf(k: u64, n: u64, q: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    ln_pmf_table(n, q)[k as usize].exp()
}

/// `P(Bin(n, q) ≥ k)`.
pub fn binom_upper_tail(k: u64, n: u64, q: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if q <= 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return 1.0;
    }
    let (lq, lr) = (q.ln(), (1.0 - q).ln());
    let terms: Vec<f64> = (k..=n)
        .map(|j| ln_choose(n, j) + j as f64 * lq + (n - j) as f64 * lr)
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max.exp() * terms.iter().map(|t| (t - max).exp()).sum::<f64>()).min(1.0)
}

/// Exact two-sided binomial test: the total probability, under `Bin(n, q)`,
/// of every outcome no more likely than the observed `successes`.
pub fn binom_test_two_sided(successes: u64, n: u64, q: f64) -> Result<f64> {
    if successes > n || n == 0 {
        return Err(Error::InvalidCounts(format!(
            "{successes} successes in {n} trials"
        )));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain {
            value: q,
            domain: "[0, 1]",
        });
    }
    if q == 0.5 {
        // symmetric null: double the tail beyond the observed count
        let k = successes.max(n - successes);
        return Ok((2.0 * binom_upper_tail(k, n, 0.5)).min(1.0));
    }
    let table = ln_pmf_table(n, q);
    // relative slack so that mirror-image outcomes tie despite rounding
    let cutoff = table[successes as usize] + 1e-7_f64.ln_1p();
    let p: f64 = table.iter().filter(|&&l| l <= cutoff).map(|l| l.exp()).sum();
    Ok(p.min(1.0))
}

/// One-sided lower `(1 − alpha)` Clopper-Pearson bound for a binomial
/// success probability: the largest `q` with `P(Bin(n, q) ≥ successes) ≤ alpha`.
pub fn clopper_pearson_lower(successes: u64, n: u64, alpha: f64) -> Result<f64> {
    if n == 0 || successes > n {
        return Err(Error::InvalidCounts(format!(
            "{successes} successes in {n} trials"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain {
            value: alpha,
            domain: "(0, 1)",
        });
    }
    if successes == 0 {
        return Ok(0.0);
    }
    // tail is increasing in q; bracket [lo, hi] with tail(lo) ≤ alpha < tail(hi)
    let (mut lo, mut hi) = (0.0_f64, successes as f64 / n as f64);
    if binom_upper_tail(successes, n, hi) <= alpha {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binom_upper_tail(successes, n, mid) <= alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Φ⁻¹ by plain bisection on the CDF.
    fn bisect_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if norm_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(inv_norm_cdf(0.5).unwrap(), 0.0);
        let oracle = bisect_quantile(0.975);
        assert!((oracle - 1.959964).abs() < 1e-6);
        assert!((inv_norm_cdf(0.975).unwrap() - oracle).abs() < 1e-9);
        for p in [0.6, 0.9, 0.99] {
            let s = inv_norm_cdf(p).unwrap() + inv_norm_cdf(1.0 - p).unwrap();
            assert!(s.abs() < 1e-9, "p={p}: {s}");
        }
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(inv_norm_cdf(bad), Err(Error::Domain { .. })));
        }
    }

    #[test]
    fn quantile_matches_bisection_across_tails() {
        for p in [1e-12, 1e-6, 0.001, 0.02425, 0.1, 0.3, 0.7, 0.97575, 0.999, 0.9999] {
            let q = inv_norm_cdf(p).unwrap();
            assert!((q - bisect_quantile(p)).abs() < 1e-9, "p={p}");
        }
    }

    #[test]
    fn quantile_round_trip_on_grid() {
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let back = norm_cdf(inv_norm_cdf(p).unwrap());
            assert!((back - p).abs() < 1e-9, "p={p}");
        }
    }

    #[test]
    fn clopper_pearson_examples() {
        assert_eq!(clopper_pearson_lower(0, 10, 0.05).unwrap(), 0.0);
        let all = clopper_pearson_lower(100, 100, 0.05).unwrap();
        assert!((all - 0.05_f64.powf(0.01)).abs() < 1e-9);
        assert!((all - 0.970487).abs() < 1e-6);
        assert!(clopper_pearson_lower(5, 4, 0.05).is_err());
        assert!(clopper_pearson_lower(1, 0, 0.05).is_err());
        assert!(clopper_pearson_lower(1, 4, 1.0).is_err());
    }

    #[test]
    fn clopper_pearson_order_properties() {
        for n in [1u64, 7, 50, 200] {
            let mut prev = 0.0;
            for s in 0..=n {
                let b = clopper_pearson_lower(s, n, 0.05).unwrap();
                assert!(b <= s as f64 / n as f64 + 1e-15);
                assert!(b >= prev);
                prev = b;
            }
        }
    }

    #[test]
    fn clopper_pearson_solves_the_tail_equation() {
        for (s, n) in [(3u64, 10u64), (80, 100), (990, 1000)] {
            let b = clopper_pearson_lower(s, n, 0.05).unwrap();
            assert!((binom_upper_tail(s, n, b) - 0.05).abs() < 1e-9);
        }
    }

    #[test]
    fn two_sided_test_symmetric_and_tail_cases() {
        assert_eq!(binom_test_two_sided(5, 10, 0.5).unwrap(), 1.0);
        assert!((binom_test_two_sided(10, 10, 0.5).unwrap() - 2.0 / 1024.0).abs() < 1e-12);
        assert!((binom_test_two_sided(8, 10, 0.5).unwrap() - 112.0 / 1024.0).abs() < 1e-12);
        assert!((binom_test_two_sided(2, 10, 0.5).unwrap() - 112.0 / 1024.0).abs() < 1e-12);
        // asymmetric null goes through the general likelihood-ordering path
        let p = binom_test_two_sided(0, 4, 0.25).unwrap();
        let pmf = |k| binom_pmf(k, 4, 0.25);
        let expect: f64 = (0..=4).map(pmf).filter(|&v| v <= pmf(0) * (1.0 + 1e-7)).sum();
        assert!((p - expect).abs() < 1e-15);
        assert!(binom_test_two_sided(11, 10, 0.5).is_err());
    }

    #[test]
    fn pmf_sums_to_one() {
        for (n, q) in [(10u64, 0.5), (37, 0.13), (200, 0.9)] {
            let s: f64 = (0..=n).map(|k| binom_pmf(k, n, q)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
