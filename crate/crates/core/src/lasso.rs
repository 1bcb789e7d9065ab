//! Randomized-lasso first-stage instrument selection and conditional TSLS
//! inference given the selected support and signs.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::{norm_quantile, truncated_normal};
use crate::error::{Error, Result};
use crate::inference::{conditional_pvalue, invert, GridSpec, InferenceReport, Method, Sided};
use crate::model::{estimates_from_moments, tsls_from_moments, tsls_standard_error, IVDataset, Moments};
use crate::par;
use crate::pretest::RandomizationLaw;
use crate::rng::{substream, tag, Rng};
use crate::sampler::{effective_sample_size, geweke_z, RandomizationDensity, SamplerConfig, SamplerDiagnostics, SamplerMethod};
use crate::stats::{tsls_statistic, TestKind};

/// Stopping rule for coordinate descent: duality gap relative to
/// `max(1, |objective|)`.
pub const GAP_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSelection {
    pub lambda_l: f64,
    #[serde(with = "crate::report::dvec")]
    pub omega: DVector<f64>,
    #[serde(with = "crate::report::dvec")]
    pub gamma_l: DVector<f64>,
    pub support: Vec<usize>,
    pub signs: Vec<f64>,
    /// `u` with `u_E = signs` and `|u_j| <= 1` off the support.
    #[serde(with = "crate::report::dvec")]
    pub subgradient: DVector<f64>,
    pub sweeps: usize,
    pub gap: f64,
    pub law: Option<RandomizationLaw>,
}

impl LassoSelection {
    /// `|| -Z'(D - Z gamma) + lambda u - omega ||_inf`.
    pub fn kkt_residual(&self, m: &Moments) -> f64 {
        let r = &m.ztz * &self.gamma_l - &m.ztd + &self.subgradient * self.lambda_l - &self.omega;
        r.amax()
    }
}

/// `0.5 ||D - Z gamma||^2 + lambda ||gamma||_1 - omega' gamma`, computed from
/// cross products.
pub fn lasso_objective(m: &Moments, gamma: &DVector<f64>, lambda: f64, omega: &DVector<f64>) -> f64 {
    0.5 * m.dtd - gamma.dot(&m.ztd) + 0.5 * gamma.dot(&(&m.ztz * gamma)) + lambda * gamma.abs().sum() - omega.dot(gamma)
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// Solves the randomized lasso for a given `omega` by cyclic coordinate
/// descent.
pub fn solve_lasso_with_omega(m: &Moments, lambda_l: f64, omega: DVector<f64>) -> Result<LassoSelection> {
    if !(lambda_l > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_L must be positive, got {lambda_l}")));
    }
    let p = m.p;
    if omega.len() != p {
        return Err(Error::Dimension(format!("omega has length {}, expected {p}", omega.len())));
    }
    let g = &m.ztz;
    let b = &m.ztd + &omega;
    // dual quantities for the gap: y'y = b'G^{-1}b
    let yty = m.quad(&b, &b);
    let mut gamma: DVector<f64> = DVector::zeros(p);
    // r = b - G gamma
    let mut r = b.clone();
    let mut sweeps = 0;
    let mut gap = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        for j in 0..p {
            let gjj = g[(j, j)];
            let old = gamma[j];
            let new = soft(r[j] + gjj * old, lambda_l) / gjj;
            if new != old {
                let delta = new - old;
                r.axpy(-delta, &g.column(j).into_owned(), 1.0);
                gamma[j] = new;
            }
        }
        let (pv, gp) = duality_gap(g, &b, yty, &gamma, &r, lambda_l);
        gap = gp;
        if gap <= GAP_TOL * pv.abs().max(1.0) {
            break;
        }
    }
    if gap > GAP_TOL * lasso_objective(m, &gamma, lambda_l, &omega).abs().max(1.0) {
        return Err(Error::NonConvergence { sweeps, gap });
    }
    let support: Vec<usize> = (0..p).filter(|&j| gamma[j] != 0.0).collect();
    let signs: Vec<f64> = support.iter().map(|&j| gamma[j].signum()).collect();
    let mut u = &r / lambda_l;
    for (&j, &s) in support.iter().zip(&signs) {
        u[j] = s;
    }
    for j in 0..p {
        if gamma[j] == 0.0 {
            u[j] = u[j].clamp(-1.0, 1.0);
        }
    }
    Ok(LassoSelection {
        lambda_l,
        omega,
        gamma_l: gamma,
        support,
        signs,
        subgradient: u,
        sweeps,
        gap,
        law: None,
    })
}

/// Lasso primal value (up to the constant `0.5 y'y`) and duality gap, with
/// the problem read as a least-squares lasso in `X = chol(G)`.
fn duality_gap(g: &DMatrix<f64>, b: &DVector<f64>, yty: f64, gamma: &DVector<f64>, r: &DVector<f64>, lambda: f64) -> (f64, f64) {
    let gg = gamma.dot(&(g * gamma));
    let bg = b.dot(gamma);
    let l1 = gamma.abs().sum();
    let rho_sq = (yty - 2.0 * bg + gg).max(0.0);
    let primal = 0.5 * rho_sq + lambda * l1;
    let rmax = r.amax();
    let s = if rmax > lambda { lambda / rmax } else { 1.0 };
    let y_minus_theta_sq = (1.0 - s) * (1.0 - s) * yty + 2.0 * s * (1.0 - s) * bg + s * s * gg;
    let dual = 0.5 * yty - 0.5 * y_minus_theta_sq;
    (primal - 0.5 * yty, (primal - dual).max(0.0))
}

pub fn solve_randomized_lasso(m: &Moments, lambda_l: f64, law: &RandomizationLaw) -> Result<LassoSelection> {
    let mut rng = substream(law.seed, &[tag::LASSO]);
    let omega = DVector::from_fn(m.p, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        law.scale * z
    });
    let mut sel = solve_lasso_with_omega(m, lambda_l, omega)?;
    sel.law = Some(*law);
    Ok(sel)
}

/// `1.1` times the median over `reps` draws of `||Z'e||_inf`, where `e` is a
/// with-replacement resample of the first-stage residuals.
pub fn default_lasso_lambda(data: &IVDataset, reps: usize, seed: u64) -> Result<f64> {
    let m = Moments::from_data(data)?;
    let resid = &data.d - &data.z * m.gamma_hat();
    let n = data.n();
    let mut rng = substream(seed, &[tag::TUNING]);
    let mut vals: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let e = DVector::from_fn(n, |_, _| resid[rng.random_range(0..n)]);
            (data.z.transpose() * e).amax()
        })
        .collect();
    vals.sort_by(f64::total_cmp);
    let mid = vals.len() / 2;
    let median = if vals.len() % 2 == 1 { vals[mid] } else { 0.5 * (vals[mid - 1] + vals[mid]) };
    Ok(1.1 * median)
}

/// Default randomization scale: half the noise level of a coordinate of
/// `Z'D`, `0.5 sqrt(RSS / (n - p) * median diag(Z'Z))`.
pub fn default_lasso_scale(m: &Moments) -> f64 {
    let mut diag: Vec<f64> = m.ztz.diagonal().iter().copied().collect();
    diag.sort_by(f64::total_cmp);
    let med = diag[diag.len() / 2];
    0.5 * (m.first_stage_rss() / m.dof() * med).sqrt()
}

/// Which instruments enter the TSLS statistic after selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LassoTarget {
    Selected,
    All,
}

/// Law of `(T, gamma_E, u_{-E})`:
/// `phi(T) g(-W T + Z'Z_E gamma_E + lambda u - O_L)` on the selection event.
#[derive(Debug, Clone)]
pub struct LassoLaw {
    pub beta0: f64,
    pub w: DVector<f64>,
    pub o: DVector<f64>,
    /// `Z'Z` columns of the support.
    pub g_e: DMatrix<f64>,
    pub support: Vec<usize>,
    pub signs: Vec<f64>,
    pub inactive: Vec<usize>,
    pub lambda: f64,
    pub g: RandomizationDensity,
    pub t_obs: f64,
    pub gamma_obs: Vec<f64>,
    pub u_obs: Vec<f64>,
}

impl LassoLaw {
    pub fn randomization_at(&self, t: f64, gamma: &[f64], u_inactive: &[f64]) -> DVector<f64> {
        let mut r = -&self.w * t - &self.o;
        for (k, &gk) in gamma.iter().enumerate() {
            r.axpy(gk, &self.g_e.column(k).into_owned(), 1.0);
        }
        for (&j, &s) in self.support.iter().zip(&self.signs) {
            r[j] += self.lambda * s;
        }
        for (&j, &uj) in self.inactive.iter().zip(u_inactive) {
            r[j] += self.lambda * uj;
        }
        r
    }

    pub fn in_event(&self, gamma: &[f64], u_inactive: &[f64]) -> bool {
        gamma.iter().zip(&self.signs).all(|(g, s)| g * s > 0.0) && u_inactive.iter().all(|u| u.abs() <= 1.0)
    }

    pub fn log_density(&self, t: f64, gamma: &[f64], u_inactive: &[f64]) -> f64 {
        if !self.in_event(gamma, u_inactive) {
            return f64::NEG_INFINITY;
        }
        let w = self.randomization_at(t, gamma, u_inactive);
        -0.5 * t * t + self.g.log_density(w.as_slice())
    }
}

/// Builds the conditional law at `beta0`.
pub fn build_lasso_law(
    m: &Moments,
    beta0: f64,
    sel: &LassoSelection,
    target: LassoTarget,
    g: RandomizationDensity,
) -> Result<LassoLaw> {
    if sel.support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let est = estimates_from_moments(m, beta0)?;
    let sigma = est.sigma_hat;
    let cols: Vec<usize> = match target {
        LassoTarget::Selected => sel.support.clone(),
        LassoTarget::All => (0..m.p).collect(),
    };
    let sub = m.select(&cols)?;
    let t_obs = tsls_statistic(&sub, beta0, sigma[(0, 0)])?;
    // Cov(Z'D, T) = Sigma_12 Z'P_E D / (sqrt(Sigma_11) ||P_E D||)
    let zt_pe_d = m.ztz.select_columns(&cols) * sub.gamma_hat();
    let w = zt_pe_d * (sigma[(0, 1)] / (sigma[(0, 0)] * sub.dpzd()).sqrt());
    let o = &m.ztd - &w * t_obs;
    let inactive: Vec<usize> = (0..m.p).filter(|j| !sel.support.contains(j)).collect();
    Ok(LassoLaw {
        beta0,
        g_e: m.ztz.select_columns(&sel.support),
        o,
        w,
        support: sel.support.clone(),
        signs: sel.signs.clone(),
        lambda: sel.lambda_l,
        g,
        t_obs,
        gamma_obs: sel.support.iter().map(|&j| sel.gamma_l[j]).collect(),
        u_obs: inactive.iter().map(|&j| sel.subgradient[j]).collect(),
        inactive,
    })
}

/// Pooled `T` draws from the lasso law.
#[derive(Debug, Clone)]
pub struct LassoDraws {
    pub t: Vec<f64>,
    pub diagnostics: SamplerDiagnostics,
}

pub fn lasso_sample(law: &LassoLaw, config: &SamplerConfig) -> Result<LassoDraws> {
    config.validate()?;
    let l0 = law.log_density(law.t_obs, &law.gamma_obs, &law.u_obs);
    if !l0.is_finite() {
        return Err(Error::NonFiniteInit(format!("log-density {l0} at the observed selection")));
    }
    let exact = config.method == SamplerMethod::Auto && law.g.gaussian_scale().is_some();
    let per_chain = config.per_chain();
    let key = law.beta0.to_bits();
    let chains: Vec<Result<(Vec<f64>, f64)>> = par::map_range(config.chains, |c| {
        let mut rng = substream(config.seed, &[tag::LASSO, key, c as u64]);
        if exact {
            Ok((lasso_gibbs_chain(law, config, per_chain, &mut rng), 1.0))
        } else {
            lasso_metropolis_chain(law, config, per_chain, &mut rng)
        }
    });
    let chains = chains.into_iter().collect::<Result<Vec<_>>>()?;
    let acc = chains.iter().map(|c| c.1).sum::<f64>() / chains.len() as f64;
    let geweke = chains.iter().map(|c| geweke_z(&c.0)).collect();
    let ess = chains.iter().map(|c| effective_sample_size(&c.0)).sum();
    let t = chains.iter().flat_map(|c| c.0.iter().copied()).collect();
    Ok(LassoDraws {
        t,
        diagnostics: SamplerDiagnostics {
            method: if exact { "gibbs".into() } else { "metropolis".into() },
            chains: chains.len(),
            draws_per_chain: per_chain,
            burn_in: config.burn_in,
            acceptance: vec![("all".into(), acc)],
            ess,
            geweke_z: geweke,
        },
    })
}

/// Coordinate-wise exact updates for Gaussian `g`; every update is a
/// (truncated) normal draw, so every state lies in the selection event.
fn lasso_gibbs_chain(law: &LassoLaw, config: &SamplerConfig, keep: usize, rng: &mut Rng) -> Vec<f64> {
    let c = law.g.gaussian_scale().expect("Gaussian randomization");
    let c2 = c * c;
    let mut t = law.t_obs;
    let mut gamma = law.gamma_obs.clone();
    let mut u = law.u_obs.clone();
    let mut r = law.randomization_at(t, &gamma, &u);
    let ww = law.w.norm_squared();
    let prec_t = 1.0 + ww / c2;
    let col_sq: Vec<f64> = (0..gamma.len()).map(|k| law.g_e.column(k).norm_squared()).collect();
    let mut out = Vec::with_capacity(keep);
    for it in 0..config.burn_in + keep {
        // T: r = r0 - W T
        r.axpy(t, &law.w, 1.0);
        let mean = (law.w.dot(&r) / c2) / prec_t;
        let z: f64 = StandardNormal.sample(rng);
        t = mean + z / prec_t.sqrt();
        r.axpy(-t, &law.w, 1.0);

        for k in 0..gamma.len() {
            let col = law.g_e.column(k);
            let rest_dot = col.dot(&r) - gamma[k] * col_sq[k];
            let mean = -rest_dot / col_sq[k];
            let sd = c / col_sq[k].sqrt();
            let new = if law.signs[k] > 0.0 {
                truncated_normal(rng, mean, sd, 0.0, f64::INFINITY)
            } else {
                truncated_normal(rng, mean, sd, f64::NEG_INFINITY, 0.0)
            };
            // an exact zero sits on the boundary; keep the old value then
            let new = if new * law.signs[k] > 0.0 { new } else { gamma[k] };
            r.axpy(new - gamma[k], &col.into_owned(), 1.0);
            gamma[k] = new;
        }

        for (k, &j) in law.inactive.iter().enumerate() {
            let rest = r[j] - law.lambda * u[k];
            let mean = -rest / law.lambda;
            let sd = c / law.lambda;
            let new = truncated_normal(rng, mean, sd, -1.0, 1.0);
            r[j] = rest + law.lambda * new;
            u[k] = new;
        }
        if it >= config.burn_in {
            out.push(t);
        }
    }
    out
}

/// Random-walk Metropolis-within-Gibbs; proposals leaving the selection
/// event are rejected.
fn lasso_metropolis_chain(law: &LassoLaw, config: &SamplerConfig, keep: usize, rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
    let mut t = law.t_obs;
    let mut gamma = law.gamma_obs.clone();
    let mut u = law.u_obs.clone();
    let mut cur = law.log_density(t, &gamma, &u);
    let dim = 1 + gamma.len() + u.len();
    let mut log_step: Vec<f64> = (0..dim)
        .map(|k| {
            if k == 0 {
                config.step_t.ln()
            } else if k <= gamma.len() {
                (config.step_d * gamma[k - 1].abs().max(1e-3)).ln()
            } else {
                (0.5f64).ln()
            }
        })
        .collect();
    let mut burn_acc = 0usize;
    let mut acc = 0usize;
    let mut out = Vec::with_capacity(keep);
    for it in 0..config.burn_in + keep {
        let burning = it < config.burn_in;
        for k in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            let step = log_step[k].exp() * z;
            let (nt, mut ng, mut nu) = (t, gamma.clone(), u.clone());
            let nt = if k == 0 { nt + step } else { nt };
            if k >= 1 && k <= gamma.len() {
                ng[k - 1] += step;
            } else if k > gamma.len() {
                nu[k - 1 - gamma.len()] += step;
            }
            let l_new = law.log_density(nt, &ng, &nu);
            let ok = l_new.is_finite() && l_new - cur >= (1.0 - rng.random::<f64>()).ln();
            if ok {
                t = nt;
                gamma = ng;
                u = nu;
                cur = l_new;
            }
            if burning {
                let gain = ((it + 1) as f64).powf(-0.6);
                log_step[k] += gain * (ok as u8 as f64 - config.adapt_target);
                burn_acc += ok as usize;
            } else {
                acc += ok as usize;
            }
        }
        if !burning {
            out.push(t);
        }
    }
    if config.burn_in > 0 && burn_acc == 0 {
        return Err(Error::ChainStuck("lasso state"));
    }
    Ok((out, acc as f64 / (keep * dim) as f64))
}

/// Conditional two-sided p-value of the post-selection TSLS statistic.
pub fn lasso_conditional_pvalue(
    m: &Moments,
    beta0: f64,
    sel: &LassoSelection,
    target: LassoTarget,
    g: &RandomizationDensity,
    config: &SamplerConfig,
) -> Result<(f64, f64, LassoDraws)> {
    let law = build_lasso_law(m, beta0, sel, target, g.clone())?;
    let draws = lasso_sample(&law, config)?;
    Ok((conditional_pvalue(&draws.t, law.t_obs, Sided::TwoSided), law.t_obs, draws))
}

fn lasso_density(sel: &LassoSelection, g: Option<&RandomizationDensity>) -> Result<RandomizationDensity> {
    match (g, &sel.law) {
        (Some(g), _) => Ok(g.clone()),
        (None, Some(law)) => Ok(RandomizationDensity::Gaussian { scale: law.scale }),
        (None, None) => Err(Error::InvalidArgument("the lasso law needs a randomization density".into())),
    }
}

/// Naive and conditional inference after lasso selection.
#[allow(clippy::too_many_arguments)]
pub fn lasso_conditional_inference(
    m: &Moments,
    beta0: f64,
    sel: &LassoSelection,
    target: LassoTarget,
    alpha: f64,
    grid: &GridSpec,
    config: &SamplerConfig,
    g: Option<&RandomizationDensity>,
) -> Result<InferenceReport> {
    if sel.support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let g = lasso_density(sel, g)?;
    let cols: Vec<usize> = match target {
        LassoTarget::Selected => sel.support.clone(),
        LassoTarget::All => (0..m.p).collect(),
    };
    let sub = m.select(&cols)?;
    let naive_p = |b: f64| -> Result<f64> {
        let est = estimates_from_moments(m, b)?;
        let t = tsls_statistic(&sub, b, est.sigma_hat[(0, 0)])?;
        Ok((2.0 * crate::distributions::norm_sf(t.abs())).min(1.0))
    };
    let (p_cond, t_obs, draws) = lasso_conditional_pvalue(m, beta0, sel, target, &g, config)?;
    let center = tsls_from_moments(&sub)?;
    let se = tsls_standard_error(&sub)?;
    let naive = invert(center, se, alpha, grid, naive_p)?;
    let conditional = invert(center, se, alpha, grid, |b| Ok(lasso_conditional_pvalue(m, b, sel, target, &g, config)?.0))?;
    let z = norm_quantile(1.0 - 0.5 * alpha);
    Ok(InferenceReport {
        method: Method::LassoConditional,
        statistic: TestKind::Tsls,
        beta0,
        statistic_value: t_obs,
        alpha,
        naive_pvalue: naive_p(beta0)?,
        conditional_pvalue: p_cond,
        naive_ci: naive.interval,
        conditional_ci: conditional.interval,
        wald_ci: Some([center - z * se, center + z * se]),
        diagnostics: Some(draws.diagnostics),
        notes: vec![format!("instruments in the statistic: {cols:?}")],
        naive_curve: naive.curve,
        conditional_curve: conditional.curve,
    })
}
