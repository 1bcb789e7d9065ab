//! Tail probability of the CLR statistic given `Q_R`, optionally conditional
//! on failing the non-randomized F-test, by one-dimensional quadrature.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::distributions::{chi2_interval, chi2_sf};
use crate::error::{Error, Result};
use crate::inference::{invert, ConfidenceInterval, GridSpec, InferenceReport, Method};
use crate::linalg;
use crate::model::{estimates_from_moments, tsls_from_moments, tsls_standard_error, Moments};
use crate::pretest::{f_statistic, penalty_lambda};
use crate::stats::{clr_stat, TestKind};

/// Mass below which the conditioning event is declared impossible.
const EMPTY_EVENT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Simpson subdivisions of the outer integral (even).
    pub panels: usize,
    /// Integrate over `theta` with `u2 = sin(theta)` instead of over `u2`.
    pub endpoint_substitution: bool,
    /// Target absolute error of the returned probability.
    pub tol: f64,
    /// Panels are doubled until the Richardson estimate meets `tol` or this
    /// many panels have been used.
    pub max_panels: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            panels: 2048,
            endpoint_substitution: true,
            tol: 1e-6,
            max_panels: 1 << 16,
        }
    }
}

/// Coefficients of the failing event
/// `d0 q_U + d1 u2 sqrt(q_R q_U) + d2 q_R <= lambda^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClrTruncation {
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
    pub lambda_sq: f64,
    pub q_r: f64,
    pub p: usize,
}

impl ClrTruncation {
    /// Writes `S = alpha U + beta R`, so `||S||^2 = alpha^2 q_U + 2 alpha beta
    /// Q_UR + beta^2 q_R`, with `alpha = (Omega_12 - b0 Omega_22) / sqrt(b0'Omega b0)`
    /// and `beta = 1 / sqrt(a0'Omega^-1 a0)`.
    pub fn from_omega(omega: &Matrix2<f64>, beta0: f64, lambda_sq: f64, q_r: f64, p: usize) -> Result<Self> {
        let b_om_b = omega[(0, 0)] - 2.0 * beta0 * omega[(0, 1)] + beta0 * beta0 * omega[(1, 1)];
        let inv = linalg::inv2(omega)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("Omega = {omega:?}")))?;
        let a_oinv_a = beta0 * beta0 * inv[(0, 0)] + 2.0 * beta0 * inv[(0, 1)] + inv[(1, 1)];
        if !(b_om_b > 0.0) || !(a_oinv_a > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "b0'Omega b0 = {b_om_b}, a0'Omega^-1 a0 = {a_oinv_a}"
            )));
        }
        let alpha = (omega[(0, 1)] - beta0 * omega[(1, 1)]) / b_om_b.sqrt();
        let beta = 1.0 / a_oinv_a.sqrt();
        Ok(Self {
            d0: alpha * alpha,
            d1: 2.0 * alpha * beta,
            d2: beta * beta,
            lambda_sq,
            q_r,
            p,
        })
    }

    /// Interval of `q_U` values inside the event at cosine `u2`; `None` when
    /// the event is empty.
    pub fn q_u_interval(&self, u2: f64) -> Option<(f64, f64)> {
        // quadratic in x = sqrt(q_U): a x^2 + b x + c <= 0
        let a = self.d0;
        let b = self.d1 * u2 * self.q_r.sqrt();
        let c = self.d2 * self.q_r - self.lambda_sq;
        let scale = a.abs().max(b.abs()).max(c.abs()).max(f64::MIN_POSITIVE);
        if a <= 1e-14 * scale {
            if b.abs() <= 1e-14 * scale {
                return (c <= 0.0).then_some((0.0, f64::INFINITY));
            }
            let root = -c / b;
            return if b > 0.0 {
                (root >= 0.0).then_some((0.0, root * root))
            } else {
                Some((root.max(0.0).powi(2), f64::INFINITY))
            };
        }
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        let (r1, r2) = if q == 0.0 {
            (0.0, 0.0)
        } else {
            let x1 = q / a;
            let x2 = c / q;
            (x1.min(x2), x1.max(x2))
        };
        if r2 < 0.0 {
            return None;
        }
        Some((r1.max(0.0).powi(2), r2 * r2))
    }
}

/// `Gamma(p/2) / (sqrt(pi) Gamma((p-1)/2))`, the density normalizer of the
/// cosine between an isotropic `p`-vector and a fixed direction.
pub fn k4_constant(p: usize) -> Result<f64> {
    if p < 2 {
        return Err(Error::InvalidArgument(format!(
            "the cosine density needs p >= 2, got p = {p}"
        )));
    }
    let pf = p as f64;
    Ok((ln_gamma(0.5 * pf) - ln_gamma(0.5 * (pf - 1.0))).exp() / PI.sqrt())
}

/// `q_U` threshold above which `LR >= t` at cosine `u2`.
fn threshold(t: f64, q_r: f64, u2: f64) -> f64 {
    t * (q_r + t) / (t + q_r * u2 * u2)
}

/// `P(LR >= t | Q_R = q_r)`, optionally also conditional on the failing event.
pub fn clr_tail(t: f64, q_r: f64, p: usize, trunc: Option<&ClrTruncation>, quad: &QuadratureConfig) -> Result<f64> {
    if p == 0 {
        return Err(Error::InvalidArgument("p must be positive".into()));
    }
    if !(q_r >= 0.0) || t.is_nan() {
        return Err(Error::InvalidArgument(format!("need q_R >= 0 and t not NaN, got q_R = {q_r}, t = {t}")));
    }
    if let Some(tr) = trunc {
        if tr.p != p || (tr.q_r - q_r).abs() > 1e-12 * q_r.max(1.0) {
            return Err(Error::InvalidArgument("truncation built for a different (p, q_R)".into()));
        }
    }
    let k = p as f64;
    let num = |u2: f64| -> f64 {
        let thr = if t > 0.0 { threshold(t, q_r, u2) } else { 0.0 };
        match trunc {
            None => chi2_sf(thr, k),
            Some(tr) => match tr.q_u_interval(u2) {
                None => 0.0,
                Some((lo, hi)) => chi2_interval(lo.max(thr), hi, k),
            },
        }
    };
    let den = |u2: f64| -> f64 {
        match trunc.and_then(|tr| tr.q_u_interval(u2)) {
            Some((lo, hi)) => chi2_interval(lo, hi, k),
            None => 0.0,
        }
    };

    if p == 1 {
        // the cosine is +-1 with equal probability
        let n = 0.5 * (num(-1.0) + num(1.0));
        return match trunc {
            None => Ok(n.clamp(0.0, 1.0)),
            Some(_) => {
                let m = 0.5 * (den(-1.0) + den(1.0));
                if m < EMPTY_EVENT {
                    return Err(Error::EmptyTruncation { prob: m });
                }
                Ok((n / m).clamp(0.0, 1.0))
            }
        };
    }
    if trunc.is_none() && (t <= 0.0 || q_r == 0.0) {
        return Ok(chi2_sf(t, k));
    }

    let k4 = k4_constant(p)?;
    // for small t / q_R the threshold dips from q_R + t to t over
    // |u2| < sqrt(t / q_R); give that window its own panels
    let width = if t > 0.0 && q_r > 0.0 { 10.0 * (t / q_r).sqrt() } else { 1.0 };
    let breaks: &[f64] = if width < 0.5 { &[-width, width] } else { &[] };
    match trunc {
        None => {
            let (v, _) = integrate(num, p, quad, k4, breaks)?;
            Ok((k4 * v).clamp(0.0, 1.0))
        }
        Some(_) => {
            let (m, m_err) = integrate(den, p, quad, f64::INFINITY, &[])?;
            let m = k4 * m;
            if m < EMPTY_EVENT {
                return Err(Error::EmptyTruncation { prob: m });
            }
            // the ratio's error is roughly (err_N + ratio err_M) / M
            let (n, n_err) = integrate(num, p, quad, f64::INFINITY, breaks)?;
            let n = k4 * n;
            let ratio = n / m;
            let est = k4 * (n_err + ratio * m_err) / m;
            if est > quad.tol {
                let finer = QuadratureConfig {
                    panels: (quad.panels * 2).max(2),
                    ..*quad
                };
                if finer.panels <= quad.max_panels {
                    return clr_tail(t, q_r, p, trunc, &finer);
                }
                return Err(Error::QuadratureNonConvergence { estimate: est, tol: quad.tol });
            }
            Ok(ratio.clamp(0.0, 1.0))
        }
    }
}

/// Integrates `f(u2) (1 - u2^2)^((p-3)/2)` over `[-1, 1]`. Panels are
/// doubled until the Richardson estimate `|I_n - I_{n/2}| / 15`, scaled by
/// `weight`, drops below `quad.tol`. Returns `(value, error estimate)`.
/// Each of the segments cut at the increasing `breaks` gets `n` panels.
fn integrate<F: Fn(f64) -> f64>(f: F, p: usize, quad: &QuadratureConfig, weight: f64, breaks: &[f64]) -> Result<(f64, f64)> {
    if quad.panels < 2 || !quad.panels.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("panels must be even and >= 2, got {}", quad.panels)));
    }
    let substitute = quad.endpoint_substitution || p == 2;
    let expo = 0.5 * (p as f64 - 3.0);
    let h = |x: f64| -> f64 {
        if substitute {
            let c = x.cos().max(0.0);
            let w = if p == 2 { 1.0 } else { c.powi(p as i32 - 2) };
            if w == 0.0 {
                0.0
            } else {
                f(x.sin()) * w
            }
        } else {
            let base = (1.0 - x * x).max(0.0);
            let w = if p == 3 { 1.0 } else { base.powf(expo) };
            if w == 0.0 {
                0.0
            } else {
                f(x) * w
            }
        }
    };
    let (a, b) = if substitute { (-FRAC_PI_2, FRAC_PI_2) } else { (-1.0, 1.0) };
    let mut cuts = vec![a];
    cuts.extend(breaks.iter().map(|&u| if substitute { u.asin() } else { u }));
    cuts.push(b);
    let mut n = quad.panels;
    loop {
        let (fine, coarse) = cuts.windows(2).fold((0.0, 0.0), |acc, w| {
            let (f, c) = simpson_pair(&h, w[0], w[1], n);
            (acc.0 + f, acc.1 + c)
        });
        let err = (fine - coarse).abs() / 15.0;
        let scaled = if weight.is_finite() { err * weight } else { 0.0 };
        if scaled <= quad.tol || n * 2 > quad.max_panels {
            if scaled > quad.tol {
                return Err(Error::QuadratureNonConvergence { estimate: scaled, tol: quad.tol });
            }
            return Ok((fine, err));
        }
        n *= 2;
    }
}

/// Composite Simpson with `n` panels and with `n / 2` panels (when `n / 2`
/// is even; otherwise the trapezoid rule on the coarse grid), sharing nodes.
fn simpson_pair<H: Fn(f64) -> f64>(h: &H, a: f64, b: f64, n: usize) -> (f64, f64) {
    let step = (b - a) / n as f64;
    let vals: Vec<f64> = (0..=n).map(|i| h(a + step * i as f64)).collect();
    let simpson = |stride: usize| -> f64 {
        let m = n / stride;
        let hs = step * stride as f64;
        let mut s = vals[0] + vals[n];
        for j in 1..m {
            s += vals[j * stride] * if j % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * hs / 3.0
    };
    let fine = simpson(1);
    let coarse = if (n / 2).is_multiple_of(2) {
        simpson(2)
    } else {
        let hs = 2.0 * step;
        let mut s = 0.5 * (vals[0] + vals[n]);
        for j in 1..n / 2 {
            s += vals[2 * j];
        }
        s * hs
    };
    (fine, coarse)
}

/// Conditional CLR p-value and its pieces at one null value.
#[derive(Debug, Clone, Serialize)]
pub struct ClrPoint {
    pub beta0: f64,
    pub lr: f64,
    pub q_r: f64,
    pub naive_pvalue: f64,
    pub conditional_pvalue: f64,
    pub truncation: ClrTruncation,
}

/// Naive and failing-conditional CLR p-values at `beta0`.
pub fn clr_point(m: &Moments, beta0: f64, lambda_sq: f64, quad: &QuadratureConfig) -> Result<ClrPoint> {
    let est = estimates_from_moments(m, beta0)?;
    let (tv, comps) = clr_stat(m, beta0, &est, quad)?;
    let trunc = ClrTruncation::from_omega(&est.omega_hat, beta0, lambda_sq, comps.q_r, m.p)?;
    let cond = clr_tail(tv.statistic, comps.q_r, m.p, Some(&trunc), quad)?;
    Ok(ClrPoint {
        beta0,
        lr: tv.statistic,
        q_r: comps.q_r,
        naive_pvalue: tv.naive_pvalue,
        conditional_pvalue: cond,
        truncation: trunc,
    })
}

/// CLR inference on the branch where the non-randomized F-test failed.
pub fn clr_conditional_inference(
    m: &Moments,
    beta0: f64,
    c0: f64,
    alpha: f64,
    grid: &GridSpec,
    quad: &QuadratureConfig,
) -> Result<InferenceReport> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let f = f_statistic(m)?;
    if f >= c0 {
        return Err(Error::PretestPassed);
    }
    let lambda = penalty_lambda(m, c0)?;
    let lambda_sq = lambda * lambda;
    let at_null = clr_point(m, beta0, lambda_sq, quad)?;
    let center = tsls_from_moments(m)?;
    let se = tsls_standard_error(m)?;

    let naive = invert(center, se, alpha, grid, |b| {
        let est = estimates_from_moments(m, b)?;
        Ok(clr_stat(m, b, &est, quad)?.0.naive_pvalue)
    })?;
    let conditional = invert(center, se, alpha, grid, |b| {
        Ok(clr_point(m, b, lambda_sq, quad)?.conditional_pvalue)
    })?;
    let mut notes = vec![
        "cosine values at which the failing event is empty carry zero weight; the tail is renormalized by the total probability of the event".to_string(),
    ];
    if !conditional.interval.convex {
        notes.push("conditional acceptance region is not an interval; the reported interval is its hull".into());
    }
    Ok(InferenceReport {
        method: Method::ClrConditional,
        statistic: TestKind::Clr,
        beta0,
        statistic_value: at_null.lr,
        alpha,
        naive_pvalue: at_null.naive_pvalue,
        conditional_pvalue: at_null.conditional_pvalue,
        naive_ci: naive.interval,
        conditional_ci: conditional.interval,
        wald_ci: None,
        diagnostics: None,
        notes,
        naive_curve: naive.curve,
        conditional_curve: conditional.curve,
    })
}

/// Convenience: the failing-branch CLR acceptance interval alone.
pub fn clr_conditional_ci(m: &Moments, c0: f64, alpha: f64, grid: &GridSpec, quad: &QuadratureConfig) -> Result<ConfidenceInterval> {
    Ok(clr_conditional_inference(m, 0.0, c0, alpha, grid, quad)?.conditional_ci)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::stats::lr_statistic;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn k4_reference_values() {
        assert!((k4_constant(3).unwrap() - 0.5).abs() < 1e-14);
        assert!((k4_constant(2).unwrap() - 1.0 / PI).abs() < 1e-14);
        assert!(k4_constant(1).is_err());
    }

    #[test]
    fn k4_normalizes_the_cosine_density() {
        let quad = QuadratureConfig::default();
        for p in 2..=10 {
            let (v, _) = integrate(|_| 1.0, p, &quad, 1.0, &[-0.1, 0.1]).unwrap();
            assert!((k4_constant(p).unwrap() * v - 1.0).abs() < 1e-8, "p = {p}");
        }
    }

    #[test]
    fn tail_limits() {
        let quad = QuadratureConfig::default();
        assert!((clr_tail(1e-12, 3.0, 4, None, &quad).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(clr_tail(0.0, 3.0, 4, None, &quad).unwrap(), 1.0);
        for p in [1, 2, 5] {
            let v = clr_tail(2.5, 0.0, p, None, &quad).unwrap();
            assert!((v - chi2_sf(2.5, p as f64)).abs() < 1e-12);
        }
        // q_R -> infinity approaches the chi2(1) tail
        let v = clr_tail(3.0, 1e7, 5, None, &quad).unwrap();
        assert!((v - chi2_sf(3.0, 1.0)).abs() < 2e-3, "{v}");
    }

    #[test]
    fn tail_is_decreasing_and_bounded() {
        let quad = QuadratureConfig::default();
        let trunc = ClrTruncation::from_omega(&Matrix2::new(1.0, 0.3, 0.3, 1.0), 0.2, 30.0, 2.0, 4).unwrap();
        let mut prev = (2.0, 2.0);
        for i in 1..=50 {
            let t = 0.2 * i as f64;
            let a = clr_tail(t, 2.0, 4, None, &quad).unwrap();
            let b = clr_tail(t, 2.0, 4, Some(&trunc), &quad).unwrap();
            assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            assert!(a < prev.0 && b < prev.1, "t = {t}");
            prev = (a, b);
        }
    }

    #[test]
    fn doubling_panels_is_self_consistent() {
        let quad = QuadratureConfig::default();
        let finer = QuadratureConfig { panels: 4096, ..quad };
        for &(p, q, t) in &[(2, 1.0, 1.0), (5, 3.0, 2.0), (10, 8.0, 5.0)] {
            let a = clr_tail(t, q, p, None, &quad).unwrap();
            let b = clr_tail(t, q, p, None, &finer).unwrap();
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn u_space_and_theta_space_agree() {
        let sub = QuadratureConfig::default();
        let plain = QuadratureConfig { endpoint_substitution: false, ..sub };
        for p in [3, 5, 7] {
            let a = clr_tail(1.7, 2.5, p, None, &sub).unwrap();
            let b = clr_tail(1.7, 2.5, p, None, &plain).unwrap();
            assert!((a - b).abs() < 1e-6, "p = {p}: {a} vs {b}");
        }
    }

    fn monte_carlo_tail(p: usize, q_r: f64, t: f64, trunc: Option<&ClrTruncation>, draws: usize, seed: u64) -> f64 {
        let mut rng = substream(seed, &[]);
        let r = q_r.sqrt();
        let (mut hit, mut kept) = (0usize, 0usize);
        for _ in 0..draws {
            let mut q_u = 0.0;
            let mut first = 0.0;
            for j in 0..p {
                let z: f64 = StandardNormal.sample(&mut rng);
                q_u += z * z;
                if j == 0 {
                    first = z;
                }
            }
            // R along the first axis without loss of generality
            let q_ur = first * r;
            if let Some(tr) = trunc {
                let s2 = tr.d0 * q_u + tr.d1 * q_ur + tr.d2 * q_r;
                if s2 > tr.lambda_sq {
                    continue;
                }
            }
            kept += 1;
            if lr_statistic(q_u, q_r, q_ur) >= t {
                hit += 1;
            }
        }
        hit as f64 / kept as f64
    }

    #[test]
    fn truncated_tail_matches_monte_carlo() {
        let quad = QuadratureConfig::default();
        let omega = Matrix2::new(1.0, 0.6, 0.6, 1.0);
        for &(p, q_r, t, lam2, beta0) in &[(3usize, 2.0, 1.5, 6.0, 0.3), (1, 1.0, 0.8, 3.0, -0.5), (5, 4.0, 2.0, 12.0, 1.0)] {
            let trunc = ClrTruncation::from_omega(&omega, beta0, lam2, q_r, p).unwrap();
            let exact = clr_tail(t, q_r, p, Some(&trunc), &quad).unwrap();
            let mc = monte_carlo_tail(p, q_r, t, Some(&trunc), 200_000, 5 + p as u64);
            assert!((exact - mc).abs() < 0.006, "p = {p}: {exact} vs {mc}");
        }
    }

    #[test]
    fn impossible_event_is_an_error() {
        let quad = QuadratureConfig::default();
        let trunc = ClrTruncation::from_omega(&Matrix2::new(1.0, 0.0, 0.0, 1.0), 0.0, 0.5, 100.0, 3).unwrap();
        assert!(matches!(
            clr_tail(1.0, 100.0, 3, Some(&trunc), &quad),
            Err(Error::EmptyTruncation { .. })
        ));
    }

    #[test]
    fn truncation_interval_matches_definition() {
        let tr = ClrTruncation::from_omega(&Matrix2::new(1.2, -0.4, -0.4, 0.8), 0.7, 9.0, 3.0, 4).unwrap();
        for &u2 in &[-1.0, -0.3, 0.0, 0.6, 1.0] {
            let inside = |q: f64| tr.d0 * q + tr.d1 * u2 * (tr.q_r * q).sqrt() + tr.d2 * tr.q_r <= tr.lambda_sq + 1e-9;
            match tr.q_u_interval(u2) {
                Some((lo, hi)) => {
                    assert!(inside(lo) && inside(hi));
                    assert!(!inside(hi * 1.01 + 1e-6));
                    if lo > 1e-9 {
                        assert!(!inside(lo * 0.99));
                    }
                }
                None => assert!((0..200).all(|i| !inside(i as f64 * 0.1))),
            }
        }
    }
}
