//! Scalar distribution functions, a truncated-normal sampler and
//! Kolmogorov–Smirnov utilities.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, gamma_ur};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

pub fn norm_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `P(chi2_k >= x)`.
pub fn chi2_sf(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if !x.is_finite() {
        return 0.0;
    }
    gamma_ur(0.5 * k, 0.5 * x)
}

/// `P(chi2_k <= x)`.
pub fn chi2_cdf(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if !x.is_finite() {
        return 1.0;
    }
    gamma_lr(0.5 * k, 0.5 * x)
}

/// `P(lo <= chi2_k <= hi)`, differencing whichever tail keeps both terms
/// small so the interval mass survives deep in either tail.
pub fn chi2_interval(lo: f64, hi: f64, k: f64) -> f64 {
    let lo = lo.max(0.0);
    if !(hi > lo) {
        return 0.0;
    }
    let mass = if lo >= k {
        chi2_sf(lo, k) - chi2_sf(hi, k)
    } else {
        chi2_cdf(hi, k) - chi2_cdf(lo, k)
    };
    mass.max(0.0)
}

/// Upper tail of the `F(d1, d2)` distribution.
pub fn f_sf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    FisherSnedecor::new(d1, d2)
        .map(|f| f.sf(x))
        .unwrap_or(f64::NAN)
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// One draw from `N(mean, sd^2)` truncated to `[lo, hi]`.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    mean + sd * std_truncated_normal(rng, a, b)
}

/// Standard normal truncated to `[a, b]` (either end may be infinite).
pub fn std_truncated_normal<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    if !(b > a) {
        return a;
    }
    if a >= 0.0 {
        tail_draw(rng, a, b)
    } else if b <= 0.0 {
        -tail_draw(rng, -b, -a)
    } else if b - a < 2.5 {
        // uniform proposal, accept with exp(-x^2/2)
        loop {
            let x = a + (b - a) * rng.random::<f64>();
            if rng.random::<f64>() <= (-0.5 * x * x).exp() {
                return x;
            }
        }
    } else {
        loop {
            let x: f64 = StandardNormal.sample(rng);
            if x >= a && x <= b {
                return x;
            }
        }
    }
}

// a >= 0
fn tail_draw<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    if a > 1e150 {
        // the excess over `a` is O(1/a); nothing representable lies beyond
        return a;
    }
    let w = b - a;
    if w.is_finite() && a * w + 0.5 * w * w < 1.0 {
        loop {
            let x = a + w * rng.random::<f64>();
            if rng.random::<f64>() <= (0.5 * (a * a - x * x)).exp() {
                return x;
            }
        }
    }
    // exponential proposal with the optimal rate
    let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let u: f64 = 1.0 - rng.random::<f64>();
        let x = a - u.ln() / alpha;
        if x > b {
            continue;
        }
        if rng.random::<f64>() <= (-0.5 * (x - alpha) * (x - alpha)).exp() {
            return x;
        }
    }
}

/// One-sample KS statistic `sup |F_n - F|`.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut xs: Vec<f64> = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0_f64, |acc, (i, &x)| {
        let f = cdf(x);
        let hi = (i as f64 + 1.0) / n - f;
        let lo = f - i as f64 / n;
        acc.max(hi).max(lo)
    })
}

/// Two-sample KS statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Asymptotic Kolmogorov p-value for statistic `d` at effective size `n`
/// (Stephens' small-sample correction).
pub fn ks_pvalue(d: f64, n: f64) -> f64 {
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS test of a p-value sample against Uniform(0, 1): `(statistic, p-value)`.
pub fn ks_uniform(sample: &[f64]) -> (f64, f64) {
    let d = ks_statistic(sample, |x| x.clamp(0.0, 1.0));
    (d, ks_pvalue(d, sample.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn chi2_tails_are_complementary() {
        for k in [1.0, 2.0, 5.0, 10.0] {
            for x in [0.1, 1.0, 4.0, 20.0] {
                assert!((chi2_sf(x, k) + chi2_cdf(x, k) - 1.0).abs() < 1e-12);
            }
        }
        // chi2_2 is exponential with mean 2
        assert!((chi2_sf(3.0, 2.0) - (-1.5f64).exp()).abs() < 1e-14);
        // deep-tail interval mass stays positive and accurate
        let m = chi2_interval(200.0, 201.0, 3.0);
        let want = chi2_sf(200.0, 3.0) - chi2_sf(201.0, 3.0);
        assert!(m > 0.0 && ((m - want) / want).abs() < 1e-8);
    }

    #[test]
    fn truncated_normal_matches_moments() {
        let mut rng = substream(11, &[0]);
        for &(a, b) in &[(-1.0, 2.0), (1.5, f64::INFINITY), (3.0, 3.2), (-0.05, 0.05), (-f64::INFINITY, -4.0)] {
            let n = 40_000;
            let draws: Vec<f64> = (0..n).map(|_| std_truncated_normal(&mut rng, a, b)).collect();
            assert!(draws.iter().all(|&x| x >= a && x <= b));
            let z = norm_cdf(b) - norm_cdf(a);
            let cdf = |x: f64| ((norm_cdf(x.clamp(a, b)) - norm_cdf(a)) / z).clamp(0.0, 1.0);
            let d = ks_statistic(&draws, cdf);
            assert!(d < 0.012, "[{a}, {b}]: KS {d}");
        }
    }

    #[test]
    fn ks_pvalue_reference_points() {
        // Kolmogorov critical value 1.358 at 5%
        let p = ks_pvalue(1.358 / 1e3, 1e6);
        assert!((p - 0.05).abs() < 2e-3, "{p}");
        let (d, _) = ks_uniform(&[0.1, 0.4, 0.7]);
        assert!((d - 0.3).abs() < 1e-12);
    }

    #[test]
    fn two_sample_ks_counts_ties_once() {
        let d = ks_two_sample(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d, 0.0);
        let d = ks_two_sample(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(d, 1.0);
    }
}
