//! Conditional null laws of the TSLS statistic given the pre-test outcome.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ModelEstimates, Moments};
use crate::pretest::PretestOutcome;
use crate::stats::tsls_statistic;

/// Log-density of the randomization term, up to a constant.
pub type LogDensityFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum RandomizationDensity {
    /// `N(0, scale^2 I)`.
    Gaussian { scale: f64 },
    /// Any other log-density; sampled by Metropolis-within-Gibbs.
    Custom(Arc<LogDensityFn>),
}

impl fmt::Debug for RandomizationDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian { scale } => f.debug_struct("Gaussian").field("scale", scale).finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl RandomizationDensity {
    pub fn log_density(&self, w: &[f64]) -> f64 {
        match self {
            Self::Gaussian { scale } => {
                let ss: f64 = w.iter().map(|v| v * v).sum();
                -0.5 * ss / (scale * scale)
            }
            Self::Custom(f) => f(w),
        }
    }

    pub fn gaussian_scale(&self) -> Option<f64> {
        match self {
            Self::Gaussian { scale } => Some(*scale),
            Self::Custom(_) => None,
        }
    }
}

/// Unnormalized law of `(t, d)`:
/// `phi(t; 0, W_T) g(-W_ST t + (d + lambda) u - O) (d + lambda)^(p-1)` on `d > 0`.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionalLaw {
    pub beta0: f64,
    pub w_t: f64,
    #[serde(with = "crate::report::dvec")]
    pub w_st: DVector<f64>,
    #[serde(with = "crate::report::dvec")]
    pub o: DVector<f64>,
    #[serde(with = "crate::report::dvec")]
    pub u: DVector<f64>,
    pub lambda: f64,
    #[serde(skip)]
    pub g: RandomizationDensity,
    /// Exponent of the change-of-variables factor `(d + lambda)`.
    pub jacobian_exponent: usize,
    pub t_obs: f64,
    pub d_obs: f64,
    // cached inner products for the exact Gibbs updates
    pub(crate) ww: f64,
    pub(crate) wu: f64,
    pub(crate) wo: f64,
    pub(crate) uo: f64,
}

impl ConditionalLaw {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        beta0: f64,
        w_t: f64,
        w_st: DVector<f64>,
        o: DVector<f64>,
        u: DVector<f64>,
        lambda: f64,
        g: RandomizationDensity,
        t_obs: f64,
        d_obs: f64,
    ) -> Result<Self> {
        let p = u.len();
        if w_st.len() != p || o.len() != p {
            return Err(Error::Dimension(format!(
                "W_ST, O and u must have equal length, got {}, {}, {p}",
                w_st.len(),
                o.len()
            )));
        }
        if !(w_t > 0.0) || !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("need W_T > 0 and lambda >= 0, got {w_t}, {lambda}")));
        }
        Ok(Self {
            beta0,
            w_t,
            ww: w_st.norm_squared(),
            wu: w_st.dot(&u),
            wo: w_st.dot(&o),
            uo: u.dot(&o),
            w_st,
            o,
            u,
            lambda,
            g,
            jacobian_exponent: p.saturating_sub(1),
            t_obs,
            d_obs,
        })
    }

    pub fn p(&self) -> usize {
        self.u.len()
    }

    /// Argument of `g` at state `(t, d)`; equals the realized `omega` at the
    /// observed state.
    pub fn randomization_at(&self, t: f64, d: f64) -> DVector<f64> {
        &self.u * (d + self.lambda) - &self.w_st * t - &self.o
    }

    pub fn log_density(&self, t: f64, d: f64) -> f64 {
        if !(d > 0.0) || !t.is_finite() {
            return f64::NEG_INFINITY;
        }
        let w = self.randomization_at(t, d);
        let jac = if self.jacobian_exponent > 0 {
            self.jacobian_exponent as f64 * (d + self.lambda).ln()
        } else {
            0.0
        };
        -0.5 * t * t / self.w_t + self.g.log_density(w.as_slice()) + jac
    }
}

/// `W_ST = Sigma_12 S / sqrt(Sigma_11 S'S)`, the asymptotic covariance of
/// `S` with the TSLS statistic.
pub fn w_st(sigma: &Matrix2<f64>, s: &DVector<f64>) -> Result<DVector<f64>> {
    let ss = s.norm_squared();
    if !(ss > 0.0) {
        return Err(Error::ZeroS);
    }
    Ok(s * (sigma[(0, 1)] / (sigma[(0, 0)] * ss).sqrt()))
}

/// The TSLS conditional law at `beta0` for a dataset that passed the
/// randomized pre-test. `est` must be evaluated at `beta0`.
pub fn build_law_tsls(
    m: &Moments,
    beta0: f64,
    pretest: &PretestOutcome,
    est: &ModelEstimates,
    g: RandomizationDensity,
) -> Result<ConditionalLaw> {
    if !pretest.passed {
        return Err(Error::PretestNotPassed);
    }
    if (est.beta0 - beta0).abs() > 1e-12 * beta0.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "estimates evaluated at beta = {}, law requested at {beta0}",
            est.beta0
        )));
    }
    let s = &pretest.s;
    let w = w_st(&est.sigma_hat, s)?;
    let t_obs = tsls_statistic(m, beta0, est.sigma_hat[(0, 0)])?;
    let o = s - &w * t_obs;
    ConditionalLaw::new(beta0, 1.0, w, o, pretest.u.clone(), pretest.lambda, g, t_obs, pretest.d)
}

/// Finite-sample law of `(S, d)` with known nuisance parameters:
/// `f(S) g(d u - S + lambda u) (d + lambda)^(p-1)` on `d > 0`, where
/// `S ~ N((Z'Z)^{1/2} gamma, Sigma_22 I)`.
#[derive(Debug, Clone)]
pub struct ExactLaw {
    pub mean_s: DVector<f64>,
    pub sigma22: f64,
    pub u: DVector<f64>,
    pub lambda: f64,
    pub g: RandomizationDensity,
}

impl ExactLaw {
    pub fn log_density(&self, s: &DVector<f64>, d: f64) -> f64 {
        if !(d > 0.0) {
            return f64::NEG_INFINITY;
        }
        let p = s.len() as f64;
        let lf = -0.5 * (s - &self.mean_s).norm_squared() / self.sigma22 - 0.5 * p * (2.0 * PI * self.sigma22).ln();
        let w = &self.u * (d + self.lambda) - s;
        lf + self.g.log_density(w.as_slice()) + (p - 1.0) * (d + self.lambda).ln()
    }
}

/// Oracle-mode law built from the true `gamma` and `Sigma`.
pub fn exact_law(
    ztz: &DMatrix<f64>,
    pretest: &PretestOutcome,
    gamma: &DVector<f64>,
    sigma: &Matrix2<f64>,
    g: RandomizationDensity,
) -> Result<ExactLaw> {
    if gamma.len() != ztz.nrows() || pretest.u.len() != gamma.len() {
        return Err(Error::Dimension("gamma, Z'Z and u disagree in size".into()));
    }
    Ok(ExactLaw {
        mean_s: linalg::sym_sqrt(ztz) * gamma,
        sigma22: sigma[(1, 1)],
        u: pretest.u.clone(),
        lambda: pretest.lambda,
        g,
    })
}
