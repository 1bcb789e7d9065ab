//! The first-stage F-test, its group-lasso reformulation and the randomized
//! version with its `(d, u)` decomposition.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Moments, SufficientS};
use crate::rng::{substream, tag};

/// Default pre-test threshold.
pub const DEFAULT_C0: f64 = 10.0;

/// Isotropic Gaussian law of the randomization term `omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomizationLaw {
    /// Standard deviation of each coordinate.
    pub scale: f64,
    pub seed: u64,
}

impl RandomizationLaw {
    pub fn new(scale: f64, seed: u64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "randomization scale must be positive, got {scale}"
            )));
        }
        Ok(Self { scale, seed })
    }

    pub fn draw(&self, p: usize) -> DVector<f64> {
        let mut rng = substream(self.seed, &[tag::PRETEST]);
        DVector::from_fn(p, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            self.scale * z
        })
    }
}

/// Result of the (randomized) pre-test program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretestOutcome {
    pub f_stat: f64,
    pub threshold_c0: f64,
    pub lambda: f64,
    #[serde(with = "crate::report::dvec")]
    pub s: DVector<f64>,
    #[serde(with = "crate::report::dvec")]
    pub omega: DVector<f64>,
    #[serde(with = "crate::report::dvec")]
    pub v_hat: DVector<f64>,
    pub d: f64,
    #[serde(with = "crate::report::dvec")]
    pub u: DVector<f64>,
    pub passed: bool,
    /// `None` for the non-randomized program.
    pub law: Option<RandomizationLaw>,
}

impl PretestOutcome {
    /// `|| (d + lambda) u - (S + omega) ||`, zero at an exact solution.
    pub fn kkt_residual(&self) -> f64 {
        if !self.passed {
            return 0.0;
        }
        let w = &self.s + &self.omega;
        ((&self.u * (self.d + self.lambda)) - w).norm()
    }
}

/// `[ ||P_Z D||^2 / p ] / [ RSS / (n - p) ]`.
pub fn f_statistic(m: &Moments) -> Result<f64> {
    let rss = m.first_stage_rss();
    if !(rss > 1e-14 * m.dtd.max(f64::MIN_POSITIVE)) {
        return Err(Error::ZeroResidual("first-stage regression"));
    }
    Ok((m.dpzd() / m.p as f64) / (rss / m.dof()))
}

/// `lambda = sqrt(C0 * p / (n - p) * RSS)`, so that `F >= C0` iff `||S|| >= lambda`.
pub fn penalty_lambda(m: &Moments, c0: f64) -> Result<f64> {
    if !(c0 >= 0.0) || !c0.is_finite() {
        return Err(Error::InvalidArgument(format!("C0 must be non-negative, got {c0}")));
    }
    Ok((c0 * m.p as f64 / m.dof() * m.first_stage_rss()).sqrt())
}

/// `0.5 sqrt(n / (n - 1)) std(S)`, with `std` taken over the entries of `S`.
/// When `p = 1` (or the entries coincide) the entry spread is undefined and
/// the first-stage noise level `sqrt(RSS / (n - p))` is used in its place.
pub fn default_randomization_scale(m: &Moments) -> f64 {
    let s = m.sufficient_s().0;
    let p = s.len();
    let spread = if p > 1 {
        let mean = s.mean();
        (s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64).sqrt()
    } else {
        0.0
    };
    let base = if spread > 0.0 {
        spread
    } else {
        (m.first_stage_rss() / m.dof()).sqrt()
    };
    let n = m.n as f64;
    0.5 * (n / (n - 1.0)).sqrt() * base
}

/// Exact minimizer of `0.5 ||v - S||^2 + lambda ||v|| - omega'v`:
/// block soft-thresholding of `w = S + omega`. `||w|| = lambda` counts as
/// not passed.
pub fn solve_with_omega(s: &SufficientS, lambda: f64, omega: DVector<f64>) -> Result<PretestOutcome> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    if omega.len() != s.len() {
        return Err(Error::Dimension(format!(
            "omega has length {}, S has length {}",
            omega.len(),
            s.len()
        )));
    }
    let w = &s.0 + &omega;
    let norm = w.norm();
    let p = s.len();
    let (v_hat, d, u, passed) = if norm > lambda {
        let u = &w / norm;
        let d = norm - lambda;
        (&u * d, d, u, true)
    } else {
        (DVector::zeros(p), 0.0, DVector::zeros(p), false)
    };
    Ok(PretestOutcome {
        f_stat: f64::NAN,
        threshold_c0: f64::NAN,
        lambda,
        s: s.0.clone(),
        omega,
        v_hat,
        d,
        u,
        passed,
        law: None,
    })
}

/// Draws `omega` from `law` and solves the randomized program.
pub fn solve_randomized(s: &SufficientS, lambda: f64, law: &RandomizationLaw) -> Result<PretestOutcome> {
    let omega = law.draw(s.len());
    let mut out = solve_with_omega(s, lambda, omega)?;
    out.law = Some(*law);
    Ok(out)
}

/// Full pre-test on a dataset: F-statistic, `lambda`, and the program solved
/// with `omega` drawn from `law` (or `omega = 0` when `law` is `None`).
pub fn run_pretest(m: &Moments, c0: f64, law: Option<&RandomizationLaw>) -> Result<PretestOutcome> {
    let f_stat = f_statistic(m)?;
    let lambda = penalty_lambda(m, c0)?;
    let s = m.sufficient_s();
    let mut out = match law {
        Some(law) => solve_randomized(&s, lambda, law)?,
        None => solve_with_omega(&s, lambda, DVector::zeros(m.p))?,
    };
    out.f_stat = f_stat;
    out.threshold_c0 = c0;
    Ok(out)
}

/// Objective of the randomized program.
pub fn randomized_objective(v: &DVector<f64>, s: &DVector<f64>, lambda: f64, omega: &DVector<f64>) -> f64 {
    0.5 * (v - s).norm_squared() + lambda * v.norm() - omega.dot(v)
}
