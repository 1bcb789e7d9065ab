use crate::distributions::norm_quantile;
use crate::error::{Error, Result};
use crate::inference::{conditional_pvalue, invert, GridSpec, InferenceReport, Method, Sided};
use crate::model::{estimates_from_moments, tsls_from_moments, tsls_standard_error, Moments};
use crate::pretest::PretestOutcome;
use crate::stats::{tsls_stat, TestKind, TestValue};

use super::{build_law_tsls, gibbs_sample, Draws, RandomizationDensity, SamplerConfig};

/// Conditional TSLS test at one null value.
#[derive(Debug, Clone)]
pub struct TslsConditional {
    pub beta0: f64,
    pub naive: TestValue,
    pub conditional_pvalue: f64,
    pub draws: Draws,
}

fn default_density(pretest: &PretestOutcome, g: Option<&RandomizationDensity>) -> Result<RandomizationDensity> {
    match (g, &pretest.law) {
        (Some(g), _) => Ok(g.clone()),
        (None, Some(law)) => Ok(RandomizationDensity::Gaussian { scale: law.scale }),
        (None, None) => Err(Error::InvalidArgument(
            "the conditional law needs the randomization density of the pre-test".into(),
        )),
    }
}

/// Two-sided conditional p-value of the TSLS statistic at `beta0`, with
/// chains started at the observed state.
pub fn tsls_conditional_pvalue(
    m: &Moments,
    beta0: f64,
    pretest: &PretestOutcome,
    g: Option<&RandomizationDensity>,
    config: &SamplerConfig,
) -> Result<TslsConditional> {
    let g = default_density(pretest, g)?;
    let est = estimates_from_moments(m, beta0)?;
    let naive = tsls_stat(m, beta0, &est)?;
    let law = build_law_tsls(m, beta0, pretest, &est, g)?;
    let draws = gibbs_sample(&law, config, law.t_obs, law.d_obs)?;
    let p = conditional_pvalue(&draws.t, law.t_obs, Sided::TwoSided);
    Ok(TslsConditional {
        beta0,
        naive,
        conditional_pvalue: p,
        draws,
    })
}

/// Naive and conditional TSLS inference: p-values at `beta0` and intervals
/// by inverting the two-sided tests over an adaptive grid.
pub fn invert_ci(
    m: &Moments,
    pretest: &PretestOutcome,
    beta0: f64,
    alpha: f64,
    grid: &GridSpec,
    config: &SamplerConfig,
    g: Option<&RandomizationDensity>,
) -> Result<InferenceReport> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if !pretest.passed {
        return Err(Error::PretestNotPassed);
    }
    let g = default_density(pretest, g)?;
    let at_null = tsls_conditional_pvalue(m, beta0, pretest, Some(&g), config)?;
    let center = tsls_from_moments(m)?;
    let se = tsls_standard_error(m)?;
    let naive = invert(center, se, alpha, grid, |b| {
        let est = estimates_from_moments(m, b)?;
        Ok(tsls_stat(m, b, &est)?.naive_pvalue)
    })?;
    let conditional = invert(center, se, alpha, grid, |b| {
        Ok(tsls_conditional_pvalue(m, b, pretest, Some(&g), config)?.conditional_pvalue)
    })?;
    let z = norm_quantile(1.0 - 0.5 * alpha);
    let mut notes = Vec::new();
    if !conditional.interval.convex {
        notes.push("conditional acceptance region is not an interval; the reported interval is its hull".into());
    }
    Ok(InferenceReport {
        method: Method::TslsConditional,
        statistic: TestKind::Tsls,
        beta0,
        statistic_value: at_null.naive.statistic,
        alpha,
        naive_pvalue: at_null.naive.naive_pvalue,
        conditional_pvalue: at_null.conditional_pvalue,
        naive_ci: naive.interval,
        conditional_ci: conditional.interval,
        wald_ci: Some([center - z * se, center + z * se]),
        diagnostics: Some(at_null.draws.diagnostics),
        notes,
        naive_curve: naive.curve,
        conditional_curve: conditional.curve,
    })
}
