//! One-call analysis: pre-test, branch selection, naive and conditional
//! inference, and the JSON report.

use serde::{Deserialize, Serialize};

use crate::clr::{clr_conditional_inference, QuadratureConfig};
use crate::distributions::norm_quantile;
use crate::error::{Error, Result};
use crate::inference::{invert, GridSpec, InferenceReport, Method};
use crate::io::ColumnMap;
use crate::lasso::{default_lasso_lambda, default_lasso_scale, lasso_conditional_inference, solve_randomized_lasso, LassoTarget};
use crate::model::{estimates_from_moments, tsls_from_moments, tsls_standard_error, IVDataset, Moments};
use crate::pretest::{default_randomization_scale, f_statistic, run_pretest, RandomizationLaw, DEFAULT_C0};
use crate::report::{AnalysisReport, Estimates, SCHEMA_VERSION};
use crate::rng::{child_seed, tag};
use crate::sampler::{invert_ci, SamplerConfig};
use crate::stats::{ar_stat, clr_stat, tsls_stat, TestKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestChoice {
    /// TSLS when the randomized pre-test passes, CLR when the F-test fails.
    Auto,
    Tsls,
    Ar,
    Clr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstStage {
    /// Randomized F-test.
    FTest,
    /// Randomized lasso instrument selection.
    Lasso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub c0: f64,
    pub alpha: f64,
    pub test: TestChoice,
    /// Null value at which p-values are reported.
    pub beta0: f64,
    pub randomization_scale: Option<f64>,
    pub sampler: SamplerConfig,
    pub ci_grid: GridSpec,
    pub quadrature: QuadratureConfig,
    /// Master seed; the randomization and sampler streams derive from it.
    pub seed: u64,
    pub columns: ColumnMap,
    /// Allows forcing a test whose conditional law is undefined on the
    /// observed pre-test branch; only naive inference is then reported.
    pub allow_branch_override: bool,
    pub first_stage: FirstStage,
    pub lasso_lambda: Option<f64>,
    pub lasso_target: LassoTarget,
    pub lasso_bootstrap_reps: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            c0: DEFAULT_C0,
            alpha: 0.05,
            test: TestChoice::Auto,
            beta0: 0.0,
            randomization_scale: None,
            sampler: SamplerConfig::default(),
            ci_grid: GridSpec::default(),
            quadrature: QuadratureConfig::default(),
            seed: 0,
            columns: ColumnMap::default(),
            allow_branch_override: false,
            first_stage: FirstStage::FTest,
            lasso_lambda: None,
            lasso_target: LassoTarget::Selected,
            lasso_bootstrap_reps: 200,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c0 >= 0.0) || !self.c0.is_finite() {
            return Err(Error::InvalidArgument(format!("C0 must be finite and non-negative, got {}", self.c0)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !self.beta0.is_finite() {
            return Err(Error::InvalidArgument("beta0 must be finite".into()));
        }
        self.sampler.validate()
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig { seed: child_seed(self.seed, &[tag::SAMPLER]), ..self.sampler }
    }
}

/// Naive inference for a statistic with a known unconditional law; the
/// conditional fields repeat the naive ones.
fn naive_only(m: &Moments, kind: TestKind, config: &AnalysisConfig, note: String) -> Result<InferenceReport> {
    let quad = config.quadrature;
    let pvalue = |b: f64| -> Result<(f64, f64)> {
        match kind {
            TestKind::Ar => {
                let v = ar_stat(m, b)?;
                Ok((v.statistic, v.naive_pvalue))
            }
            TestKind::Tsls => {
                let v = tsls_stat(m, b, &estimates_from_moments(m, b)?)?;
                Ok((v.statistic, v.naive_pvalue))
            }
            TestKind::Clr => {
                let v = clr_stat(m, b, &estimates_from_moments(m, b)?, &quad)?.0;
                Ok((v.statistic, v.naive_pvalue))
            }
        }
    };
    let center = tsls_from_moments(m)?;
    let se = tsls_standard_error(m)?;
    let inv = invert(center, se, config.alpha, &config.ci_grid, |b| Ok(pvalue(b)?.1))?;
    let (stat, p) = pvalue(config.beta0)?;
    let z = norm_quantile(1.0 - 0.5 * config.alpha);
    Ok(InferenceReport {
        method: Method::Naive,
        statistic: kind,
        beta0: config.beta0,
        statistic_value: stat,
        alpha: config.alpha,
        naive_pvalue: p,
        conditional_pvalue: p,
        naive_ci: inv.interval,
        conditional_ci: inv.interval,
        wald_ci: (kind == TestKind::Tsls).then_some([center - z * se, center + z * se]),
        diagnostics: None,
        notes: vec![note],
        naive_curve: inv.curve.clone(),
        conditional_curve: inv.curve,
    })
}

/// Runs the pre-test on a prepared dataset, picks the branch and reports
/// naive and conditional inference together with the full pre-test state.
pub fn analyze(data: &IVDataset, config: &AnalysisConfig) -> Result<AnalysisReport> {
    config.validate()?;
    let m = Moments::from_data(data)?;
    let f = f_statistic(&m)?;
    let scale = match config.randomization_scale {
        Some(s) => s,
        None => default_randomization_scale(&m),
    };
    let law = RandomizationLaw::new(scale, config.seed)?;
    let pretest = run_pretest(&m, config.c0, Some(&law))?;
    let sampler = config.sampler();
    let mut lasso = None;

    let inference = if config.first_stage == FirstStage::Lasso {
        let lambda = match config.lasso_lambda {
            Some(l) => l,
            None => default_lasso_lambda(data, config.lasso_bootstrap_reps, child_seed(config.seed, &[tag::TUNING]))?,
        };
        let lasso_law = RandomizationLaw::new(default_lasso_scale(&m), child_seed(config.seed, &[tag::LASSO]))?;
        let sel = solve_randomized_lasso(&m, lambda, &lasso_law)?;
        let report = lasso_conditional_inference(&m, config.beta0, &sel, config.lasso_target, config.alpha, &config.ci_grid, &sampler, None);
        lasso = Some(sel);
        report?
    } else {
        let passed = pretest.passed;
        let fails = f < config.c0;
        let wanted = match config.test {
            TestChoice::Auto if passed => TestKind::Tsls,
            TestChoice::Auto => TestKind::Clr,
            TestChoice::Tsls => TestKind::Tsls,
            TestChoice::Clr => TestKind::Clr,
            TestChoice::Ar => TestKind::Ar,
        };
        match wanted {
            TestKind::Tsls if passed => invert_ci(&m, &pretest, config.beta0, config.alpha, &config.ci_grid, &sampler, None)?,
            TestKind::Clr if fails => clr_conditional_inference(&m, config.beta0, config.c0, config.alpha, &config.ci_grid, &config.quadrature)?,
            TestKind::Ar => naive_only(
                &m,
                TestKind::Ar,
                config,
                "the AR null law F(p, n - p) does not depend on instrument strength; no selection adjustment is applied".into(),
            )?,
            TestKind::Clr if config.test == TestChoice::Auto => naive_only(
                &m,
                TestKind::Clr,
                config,
                "the randomized pre-test failed while F >= C0; the CLR law conditional on this event is not available, so only naive CLR inference is reported".into(),
            )?,
            kind if config.allow_branch_override => naive_only(
                &m,
                kind,
                config,
                "branch override: the conditional law of this statistic is undefined on the observed pre-test outcome; only naive inference is reported".into(),
            )?,
            TestKind::Tsls => return Err(Error::PretestNotPassed),
            TestKind::Clr => return Err(Error::PretestPassed),
        }
    };

    let estimates = Estimates {
        beta_tsls: tsls_from_moments(&m)?,
        se_tsls: tsls_standard_error(&m)?,
        f_stat: f,
    };
    Ok(AnalysisReport {
        schema_version: SCHEMA_VERSION,
        n: m.n,
        p: m.p,
        absorbed: m.absorbed,
        instruments: data.instrument_names.clone(),
        branch: inference.method,
        estimates,
        pretest,
        lasso,
        inference,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, DGPConfig};

    fn fast() -> AnalysisConfig {
        AnalysisConfig {
            sampler: SamplerConfig { n_samples: 2000, burn_in: 300, ..SamplerConfig::default() },
            ci_grid: GridSpec { points: 41, refine_steps: 6, ..GridSpec::default() },
            ..AnalysisConfig::default()
        }
    }

    #[test]
    fn strong_instruments_take_the_tsls_branch() {
        let data = generate(&DGPConfig::equal_strength(300, 3, 1.0, 0.5, 0.5, 1)).unwrap();
        let r = analyze(&data, &AnalysisConfig { beta0: 1.0, ..fast() }).unwrap();
        assert_eq!(r.branch, Method::TslsConditional);
        assert!(r.pretest.passed && r.estimates.f_stat > 10.0);
        assert!(r.inference.conditional_ci.contains(1.0));
        // far from the threshold the conditioning is nearly vacuous
        assert!((r.inference.conditional_pvalue - r.inference.naive_pvalue).abs() < 0.05);
    }

    #[test]
    fn weak_instruments_take_the_clr_branch_and_forcing_tsls_is_refused() {
        let data = generate(&DGPConfig::equal_strength(300, 3, 1.0, 0.0, 0.5, 2)).unwrap();
        let r = analyze(&data, &fast()).unwrap();
        assert_eq!(r.branch, Method::ClrConditional);
        assert!(!r.pretest.passed);
        let forced = AnalysisConfig { test: TestChoice::Tsls, ..fast() };
        assert!(matches!(analyze(&data, &forced), Err(Error::PretestNotPassed)));
        let over = AnalysisConfig { allow_branch_override: true, ..forced };
        assert_eq!(analyze(&data, &over).unwrap().branch, Method::Naive);
    }

    #[test]
    fn report_is_reproducible_and_versioned() {
        let data = generate(&DGPConfig::equal_strength(200, 2, 1.0, 0.4, 0.3, 3)).unwrap();
        let cfg = AnalysisConfig { seed: 9, ..fast() };
        let a = serde_json::to_string(&analyze(&data, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&analyze(&data, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["schema_version"], SCHEMA_VERSION);
        assert_eq!(v["pretest"]["omega"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn ar_is_reported_naively() {
        let data = generate(&DGPConfig::equal_strength(200, 3, 1.0, 0.1, 0.3, 4)).unwrap();
        let r = analyze(&data, &AnalysisConfig { test: TestChoice::Ar, ..fast() }).unwrap();
        assert_eq!(r.inference.statistic, TestKind::Ar);
        assert_eq!(r.inference.naive_pvalue, r.inference.conditional_pvalue);
    }
}
