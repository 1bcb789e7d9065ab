//! Data generation, naive-versus-conditional Monte Carlo experiments and a
//! brute-force rejection sampler for the conditional null law.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clr::{clr_point, QuadratureConfig};
use crate::distributions::{ks_uniform, norm_sf};
use crate::error::{Error, Result};
use crate::model::{estimates_from_moments, prepare, IVDataset, Moments};
use crate::par;
use crate::pretest::{default_randomization_scale, penalty_lambda, run_pretest, RandomizationLaw};
use crate::rng::{child_seed, substream, tag};
use crate::lasso::{default_lasso_lambda, default_lasso_scale, lasso_conditional_pvalue, solve_randomized_lasso, LassoTarget};
use crate::sampler::{tsls_conditional_pvalue, w_st, ConditionalLaw, RandomizationDensity, SamplerConfig};
use crate::stats::tsls_statistic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentLaw {
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DGPConfig {
    pub n: usize,
    pub p: usize,
    pub beta_star: f64,
    pub gamma_star: Vec<f64>,
    /// Covariance of `(delta, xi)`.
    pub sigma_star: [[f64; 2]; 2],
    pub instrument_law: InstrumentLaw,
    pub seed: u64,
}

impl DGPConfig {
    /// Equal first-stage coefficients `r`, unit error variances.
    pub fn equal_strength(n: usize, p: usize, beta_star: f64, r: f64, sigma12: f64, seed: u64) -> Self {
        Self {
            n,
            p,
            beta_star,
            gamma_star: vec![r; p],
            sigma_star: [[1.0, sigma12], [sigma12, 1.0]],
            instrument_law: InstrumentLaw::StandardNormal,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n <= self.p + 1 {
            return Err(Error::Dimension(format!("need n > p + 1 >= 2, got n = {}, p = {}", self.n, self.p)));
        }
        if self.gamma_star.len() != self.p {
            return Err(Error::Dimension(format!("gamma* has length {}, p = {}", self.gamma_star.len(), self.p)));
        }
        let s = self.sigma_star;
        if !(s[0][0] > 0.0 && s[1][1] > 0.0) || (s[0][1] - s[1][0]).abs() > 1e-12 || s[0][1] * s[0][1] >= s[0][0] * s[1][1] {
            return Err(Error::NotPositiveDefinite(format!("Sigma* = {s:?}")));
        }
        Ok(())
    }

    pub fn sigma_matrix(&self) -> Matrix2<f64> {
        let s = self.sigma_star;
        Matrix2::new(s[0][0], s[0][1], s[1][0], s[1][1])
    }
}

/// Replication `rep` of the design, prepared (centered).
pub fn generate_rep(config: &DGPConfig, rep: u64) -> Result<IVDataset> {
    config.validate()?;
    let mut rng = substream(config.seed, &[tag::DGP, rep]);
    let (n, p) = (config.n, config.p);
    let z = match config.instrument_law {
        InstrumentLaw::StandardNormal => DMatrix::from_fn(n, p, |_, _| -> f64 { StandardNormal.sample(&mut rng) }),
    };
    let s = config.sigma_star;
    let a = s[0][0].sqrt();
    let b = s[0][1] / a;
    let c = (s[1][1] - b * b).sqrt();
    let gamma = DVector::from_column_slice(&config.gamma_star);
    let zg = &z * gamma;
    let mut y = DVector::zeros(n);
    let mut d = DVector::zeros(n);
    for i in 0..n {
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        let delta = a * e1;
        let xi = b * e1 + c * e2;
        d[i] = zg[i] + xi;
        y[i] = d[i] * config.beta_star + delta;
    }
    prepare(&IVDataset::new(y, d, z, None)?)
}

pub fn generate(config: &DGPConfig) -> Result<IVDataset> {
    generate_rep(config, 0)
}

/// Options shared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentOptions {
    pub sampler: SamplerConfig,
    /// Fixed randomization scale; `None` uses the per-dataset default.
    pub randomization_scale: Option<f64>,
    /// Fewest replications on the branch for a result to be reported.
    pub min_branch: usize,
    pub quadrature: QuadratureConfig,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            randomization_scale: None,
            min_branch: 50,
            quadrature: QuadratureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Randomized pre-test passed; TSLS naive versus conditional.
    TslsPass,
    /// Non-randomized pre-test failed; CLR naive versus conditional.
    ClrFail,
    /// Randomized lasso selected at least one instrument; TSLS on the
    /// selected set, naive versus conditional.
    LassoSelected,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub reps: usize,
    /// Replications on the branch.
    pub branch_count: usize,
    /// Replications whose analysis raised an error; excluded from the rates.
    pub failed: usize,
    pub passing_rate: f64,
    pub naive_coverage: f64,
    pub conditional_coverage: f64,
    pub se_passing: f64,
    pub se_naive: f64,
    pub se_conditional: f64,
    pub pvalue_samples: Vec<f64>,
    pub naive_pvalue_samples: Vec<f64>,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
}

fn binomial_se(rate: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        (rate * (1.0 - rate) / n as f64).sqrt()
    }
}

enum RepOutcome {
    OffBranch,
    Failed,
    On { naive_p: f64, cond_p: f64 },
}

fn run_rep(config: &DGPConfig, rep: u64, c0: f64, branch: Branch, opts: &ExperimentOptions) -> Result<RepOutcome> {
    let data = generate_rep(config, rep)?;
    let m = Moments::from_data(&data)?;
    let beta0 = config.beta_star;
    match branch {
        Branch::TslsPass => {
            let scale = opts.randomization_scale.unwrap_or_else(|| default_randomization_scale(&m));
            let law = RandomizationLaw::new(scale, child_seed(config.seed, &[tag::PRETEST, rep]))?;
            let pre = run_pretest(&m, c0, Some(&law))?;
            if !pre.passed {
                return Ok(RepOutcome::OffBranch);
            }
            let sampler = SamplerConfig {
                seed: child_seed(config.seed, &[tag::SAMPLER, rep]),
                ..opts.sampler
            };
            match tsls_conditional_pvalue(&m, beta0, &pre, None, &sampler) {
                Ok(res) => Ok(RepOutcome::On {
                    naive_p: res.naive.naive_pvalue,
                    cond_p: res.conditional_pvalue,
                }),
                Err(_) => Ok(RepOutcome::Failed),
            }
        }
        Branch::LassoSelected => {
            let lambda = default_lasso_lambda(&data, 100, child_seed(config.seed, &[tag::TUNING, rep]))?;
            let law = RandomizationLaw::new(default_lasso_scale(&m), child_seed(config.seed, &[tag::LASSO, rep]))?;
            let sel = solve_randomized_lasso(&m, lambda, &law)?;
            if sel.support.is_empty() {
                return Ok(RepOutcome::OffBranch);
            }
            let sampler = SamplerConfig {
                seed: child_seed(config.seed, &[tag::SAMPLER, rep]),
                ..opts.sampler
            };
            let g = RandomizationDensity::Gaussian { scale: law.scale };
            match lasso_conditional_pvalue(&m, beta0, &sel, LassoTarget::Selected, &g, &sampler) {
                Ok((p, t, _)) => Ok(RepOutcome::On {
                    naive_p: naive_two_sided(t),
                    cond_p: p,
                }),
                Err(_) => Ok(RepOutcome::Failed),
            }
        }
        Branch::ClrFail => {
            let pre = run_pretest(&m, c0, None)?;
            if pre.passed {
                return Ok(RepOutcome::OffBranch);
            }
            let lambda = penalty_lambda(&m, c0)?;
            match clr_point(&m, beta0, lambda * lambda, &opts.quadrature) {
                Ok(pt) => Ok(RepOutcome::On {
                    naive_p: pt.naive_pvalue,
                    cond_p: pt.conditional_pvalue,
                }),
                Err(_) => Ok(RepOutcome::Failed),
            }
        }
    }
}

/// Runs `reps` replications under the null `beta0 = beta*` and tallies the
/// branch, naive and conditional p-values. Coverage at level `alpha` is
/// `p(beta*) >= alpha`, the event that the inverted interval retains `beta*`.
pub fn run_experiment(
    config: &DGPConfig,
    c0: f64,
    alpha: f64,
    reps: usize,
    branch: Branch,
    opts: &ExperimentOptions,
) -> Result<ExperimentResult> {
    config.validate()?;
    let outcomes: Vec<Result<RepOutcome>> = par::map_range(reps, |r| run_rep(config, r as u64, c0, branch, opts));
    let mut naive = Vec::new();
    let mut cond = Vec::new();
    let mut failed = 0;
    let mut on = 0;
    for o in outcomes {
        match o? {
            RepOutcome::OffBranch => {}
            RepOutcome::Failed => {
                failed += 1;
                on += 1;
            }
            RepOutcome::On { naive_p, cond_p } => {
                on += 1;
                naive.push(naive_p);
                cond.push(cond_p);
            }
        }
    }
    let used = cond.len();
    if used < opts.min_branch {
        return Err(Error::InsufficientBranch { got: used, need: opts.min_branch });
    }
    let passing = match branch {
        Branch::TslsPass | Branch::LassoSelected => on as f64 / reps as f64,
        Branch::ClrFail => 1.0 - on as f64 / reps as f64,
    };
    let naive_cov = naive.iter().filter(|&&p| p >= alpha).count() as f64 / used as f64;
    let cond_cov = cond.iter().filter(|&&p| p >= alpha).count() as f64 / used as f64;
    let (ks, ks_p) = ks_uniform(&cond);
    Ok(ExperimentResult {
        reps,
        branch_count: on,
        failed,
        passing_rate: passing,
        naive_coverage: naive_cov,
        conditional_coverage: cond_cov,
        se_passing: binomial_se(passing, reps),
        se_naive: binomial_se(naive_cov, used),
        se_conditional: binomial_se(cond_cov, used),
        pvalue_samples: cond,
        naive_pvalue_samples: naive,
        ks_statistic: ks,
        ks_pvalue: ks_p,
    })
}

/// Conditional TSLS p-values over null replications that passed the
/// randomized pre-test, with their KS test against Uniform(0, 1).
pub fn uniformity_experiment(config: &DGPConfig, c0: f64, reps: usize, opts: &ExperimentOptions) -> Result<ExperimentResult> {
    if reps < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 replications, got {reps}")));
    }
    run_experiment(config, c0, 0.05, reps, Branch::TslsPass, opts)
}

/// Sweep over `(r, Sigma_12)` with all instruments of equal strength `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    pub n: usize,
    pub p: usize,
    pub beta_star: f64,
    pub r_values: Vec<f64>,
    pub sigma12_values: Vec<f64>,
    pub seed: u64,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            n: 1000,
            p: 10,
            beta_star: 1.0,
            r_values: vec![0.08, 0.3, 1.0],
            sigma12_values: vec![0.0, 0.2, 0.4, 0.6, 0.8, 0.9],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageCell {
    pub r: f64,
    pub sigma12: f64,
    pub result: ExperimentResult,
}

pub fn coverage_experiment(
    grid: &ExperimentGrid,
    c0: f64,
    alpha: f64,
    reps: usize,
    branch: Branch,
    opts: &ExperimentOptions,
) -> Result<Vec<CoverageCell>> {
    let mut cells = Vec::new();
    for (i, &r) in grid.r_values.iter().enumerate() {
        for (j, &s12) in grid.sigma12_values.iter().enumerate() {
            let seed = child_seed(grid.seed, &[i as u64, j as u64]);
            let config = DGPConfig::equal_strength(grid.n, grid.p, grid.beta_star, r, s12, seed);
            let result = run_experiment(&config, c0, alpha, reps, branch, opts)?;
            cells.push(CoverageCell { r, sigma12: s12, result });
        }
    }
    Ok(cells)
}

/// Columns `r, sigma12, passing_rate, naive_cov, cond_cov, se`; `se` is the
/// binomial standard error of the conditional coverage.
pub fn write_coverage_csv<W: Write>(cells: &[CoverageCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["r", "sigma12", "passing_rate", "naive_cov", "cond_cov", "se"])?;
    for c in cells {
        w.write_record(&[
            c.r.to_string(),
            c.sigma12.to_string(),
            c.result.passing_rate.to_string(),
            c.result.naive_coverage.to_string(),
            c.result.conditional_coverage.to_string(),
            c.result.se_conditional.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `p_sorted, ecdf`.
pub fn write_pvalue_cdf_csv<W: Write>(pvalues: &[f64], out: W) -> Result<()> {
    let mut xs = pvalues.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p_sorted", "ecdf"])?;
    for (i, p) in xs.iter().enumerate() {
        w.write_record(&[p.to_string(), ((i + 1) as f64 / n).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reference values around which the oracle keeps replications. Besides a
/// cone on `u` and a ball on `O`, the two scalars that place the selection
/// boundary in `t` are matched: the margin `u'O - lambda` and the slope
/// `u'W_ST`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleNeighborhood {
    #[serde(with = "crate::report::dvec")]
    pub u_ref: DVector<f64>,
    #[serde(with = "crate::report::dvec")]
    pub o_ref: DVector<f64>,
    pub margin_ref: f64,
    pub slope_ref: f64,
    /// Smallest admissible cosine between `u` and `u_ref`.
    pub min_cosine: f64,
    /// Largest admissible `||O - O_ref||`.
    pub o_radius: f64,
    pub margin_tol: f64,
    pub slope_tol: f64,
}

impl OracleNeighborhood {
    /// Neighborhood of the observed state of a conditional law.
    pub fn around(law: &ConditionalLaw, min_cosine: f64, o_radius: f64, margin_tol: f64, slope_tol: f64) -> Self {
        Self {
            u_ref: law.u.clone(),
            o_ref: law.o.clone(),
            margin_ref: law.u.dot(&law.o) - law.lambda,
            slope_ref: law.u.dot(&law.w_st),
            min_cosine,
            o_radius,
            margin_tol,
            slope_tol,
        }
    }

    pub fn contains(&self, s: &OracleState) -> bool {
        s.passed
            && s.u.dot(&self.u_ref) >= self.min_cosine
            && (&s.o - &self.o_ref).norm() <= self.o_radius
            && (s.u.dot(&s.o) - s.lambda - self.margin_ref).abs() <= self.margin_tol
            && (s.u.dot(&s.w) - self.slope_ref).abs() <= self.slope_tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSample {
    pub t: Vec<f64>,
    pub tried: usize,
    pub passed: usize,
}

/// Quantities of one replication that the oracle conditions on.
#[derive(Debug, Clone)]
pub struct OracleState {
    pub passed: bool,
    pub t: f64,
    pub lambda: f64,
    pub u: DVector<f64>,
    pub o: DVector<f64>,
    pub w: DVector<f64>,
}

/// Pre-test outcome, TSLS statistic, `W_ST` and `O` for replication `rep`.
pub fn oracle_state(config: &DGPConfig, rep: u64, beta0: f64, c0: f64, law: &RandomizationLaw) -> Result<OracleState> {
    let data = generate_rep(config, rep)?;
    let m = Moments::from_data(&data)?;
    let draw_law = RandomizationLaw::new(law.scale, child_seed(law.seed, &[tag::ORACLE, rep]))?;
    let pre = run_pretest(&m, c0, Some(&draw_law))?;
    if !pre.passed {
        let z = DVector::zeros(m.p);
        return Ok(OracleState { passed: false, t: f64::NAN, lambda: pre.lambda, u: pre.u, o: z.clone(), w: z });
    }
    let est = estimates_from_moments(&m, beta0)?;
    let t = tsls_statistic(&m, beta0, est.sigma_hat[(0, 0)])?;
    let w = w_st(&est.sigma_hat, &pre.s)?;
    let o = &pre.s - &w * t;
    Ok(OracleState { passed: true, t, lambda: pre.lambda, u: pre.u, o, w })
}

/// Simulates datasets under `beta* = beta0`, runs the randomized pre-test
/// with fresh `omega`, and keeps the TSLS statistic of replications that
/// pass with `(u, O)` inside `neighborhood` (everything when `None`).
#[allow(clippy::too_many_arguments)]
pub fn rejection_oracle(
    config: &DGPConfig,
    beta0: f64,
    c0: f64,
    law: &RandomizationLaw,
    reps: usize,
    neighborhood: Option<&OracleNeighborhood>,
    min_retained: usize,
) -> Result<OracleSample> {
    let config = DGPConfig { beta_star: beta0, ..config.clone() };
    const CHUNK: usize = 4096;
    let mut t = Vec::new();
    let mut passed = 0;
    let mut start = 0;
    while start < reps {
        let len = CHUNK.min(reps - start);
        let states: Vec<Result<OracleState>> = par::map_range(len, |i| oracle_state(&config, (start + i) as u64, beta0, c0, law));
        for s in states {
            let s = s?;
            if !s.passed {
                continue;
            }
            passed += 1;
            let keep = neighborhood.is_none_or(|nb| nb.contains(&s));
            if keep {
                t.push(s.t);
            }
        }
        start += len;
    }
    if t.len() < min_retained {
        return Err(Error::RetentionTooLow {
            retained: t.len(),
            tried: reps,
            rate: t.len() as f64 / reps as f64,
            need: min_retained,
        });
    }
    Ok(OracleSample { t, tried: reps, passed })
}

/// Two-sided naive TSLS p-value at `beta*`; used to show the distortion of
/// unconditional inference after the pre-test.
pub fn naive_two_sided(t: f64) -> f64 {
    (2.0 * norm_sf(t.abs())).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tsls_from_moments;
    use crate::pretest::f_statistic;

    #[test]
    fn no_endogeneity_no_signal_gives_uncorrelated_residuals() {
        let cfg = DGPConfig {
            sigma_star: [[1.0, 0.0], [0.0, 1.0]],
            ..DGPConfig::equal_strength(1000, 3, 1.0, 0.0, 0.0, 5)
        };
        let data = generate(&cfg).unwrap();
        let m = Moments::from_data(&data).unwrap();
        let fitted = &data.z * m.gamma_hat();
        let resid = &data.y - &data.d * 1.0;
        let corr = fitted.dot(&resid) / (fitted.norm() * resid.norm());
        assert!(corr.abs() < 3.0 / (1000f64).sqrt());
        for j in 0..3 {
            assert!(data.z.column(j).mean().abs() < 1e-10);
        }
    }

    #[test]
    fn strong_instruments_always_pass() {
        let cfg = DGPConfig::equal_strength(1000, 10, 1.0, 1.0, 0.5, 6);
        let passes = (0..200)
            .filter(|&r| {
                let m = Moments::from_data(&generate_rep(&cfg, r).unwrap()).unwrap();
                f_statistic(&m).unwrap() >= 10.0
            })
            .count();
        assert_eq!(passes, 200);
    }

    #[test]
    fn tsls_recovers_beta_within_three_standard_errors() {
        let cfg = DGPConfig::equal_strength(500, 3, 1.0, 0.5, 0.5, 7);
        let est: Vec<f64> = (0..500)
            .map(|r| tsls_from_moments(&Moments::from_data(&generate_rep(&cfg, r).unwrap()).unwrap()).unwrap())
            .collect();
        let mean = est.iter().sum::<f64>() / 500.0;
        let sd = (est.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / 499.0).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sd / (500f64).sqrt(), "{mean} {sd}");
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = DGPConfig::equal_strength(50, 2, 1.0, 0.3, 0.5, 8);
        assert_eq!(generate_rep(&cfg, 3).unwrap(), generate_rep(&cfg, 3).unwrap());
        assert_ne!(generate_rep(&cfg, 3).unwrap(), generate_rep(&cfg, 4).unwrap());
    }

    #[test]
    fn coverage_csv_layout() {
        let cell = CoverageCell {
            r: 0.5,
            sigma12: 0.8,
            result: ExperimentResult {
                reps: 10,
                branch_count: 5,
                failed: 0,
                passing_rate: 0.5,
                naive_coverage: 0.8,
                conditional_coverage: 1.0,
                se_passing: 0.1,
                se_naive: 0.1,
                se_conditional: 0.0,
                pvalue_samples: vec![],
                naive_pvalue_samples: vec![],
                ks_statistic: 0.0,
                ks_pvalue: 1.0,
            },
        };
        let mut buf = Vec::new();
        write_coverage_csv(&[cell], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "r,sigma12,passing_rate,naive_cov,cond_cov,se\n0.5,0.8,0.5,0.8,1,0\n");
        let mut buf = Vec::new();
        write_pvalue_cdf_csv(&[0.5, 0.1], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "p_sorted,ecdf\n0.1,0.5\n0.5,1\n");
    }
}
