//! P-value curves, confidence-interval inversion over an adaptive grid, and
//! the report type shared by all inference branches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::sampler::SamplerDiagnostics;
use crate::stats::TestKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sided {
    Upper,
    Lower,
    TwoSided,
}

/// Fraction of draws at or beyond `t_obs`. The two-sided value is twice the
/// smaller tail, capped at one.
pub fn conditional_pvalue(draws: &[f64], t_obs: f64, sided: Sided) -> f64 {
    if draws.is_empty() {
        return f64::NAN;
    }
    let n = draws.len() as f64;
    let upper = || draws.iter().filter(|&&t| t >= t_obs).count() as f64 / n;
    let lower = || draws.iter().filter(|&&t| t <= t_obs).count() as f64 / n;
    match sided {
        Sided::Upper => upper(),
        Sided::Lower => lower(),
        Sided::TwoSided => (2.0 * upper().min(lower())).min(1.0),
    }
}

/// Grid used to invert a test into a confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Points in the initial grid.
    pub points: usize,
    /// Initial half-width in standard errors around the estimate.
    pub half_width_se: f64,
    /// Growth factor of the half-width per expansion round.
    pub expansion: f64,
    /// An endpoint still retained at this magnitude is reported unbounded.
    pub unbounded_at: f64,
    /// When false, reaching `unbounded_at` is an error instead of a flag.
    pub allow_unbounded: bool,
    /// Bisection steps used to sharpen each endpoint.
    pub refine_steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 201,
            half_width_se: 8.0,
            expansion: 2.0,
            unbounded_at: 1e5,
            allow_unbounded: true,
            refine_steps: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub lower_unbounded: bool,
    pub upper_unbounded: bool,
    /// No grid point was retained; `lower = upper` is the arg-max of the
    /// p-value curve.
    pub empty: bool,
    /// False when an excluded grid point lies strictly inside the hull.
    pub convex: bool,
}

impl ConfidenceInterval {
    pub fn contains(&self, beta: f64) -> bool {
        if self.empty {
            return false;
        }
        (self.lower_unbounded || beta >= self.lower) && (self.upper_unbounded || beta <= self.upper)
    }

    pub fn width(&self) -> f64 {
        if self.lower_unbounded || self.upper_unbounded {
            f64::INFINITY
        } else {
            self.upper - self.lower
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub beta: f64,
    pub pvalue: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Inversion {
    pub interval: ConfidenceInterval,
    /// Every evaluated point, sorted by `beta`.
    pub curve: Vec<GridPoint>,
}

/// Inverts `pvalue` at level `alpha`: keeps every `beta` with
/// `pvalue(beta) >= alpha` and returns the hull of the kept set.
///
/// The grid starts at `center +- half_width_se * se` and grows by
/// `expansion` on each side whose outermost point is still kept.
pub fn invert<F>(center: f64, se: f64, alpha: f64, spec: &GridSpec, pvalue: F) -> Result<Inversion>
where
    F: Fn(f64) -> Result<f64> + Sync + Send,
{
    if spec.points < 3 || !(spec.expansion > 1.0) || !(spec.half_width_se > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid grid specification {spec:?}")));
    }
    if !center.is_finite() {
        return Err(Error::InvalidArgument(format!("grid center {center} is not finite")));
    }
    let se = if se.is_finite() && se > 0.0 { se } else { 1.0 };
    let eval = |betas: Vec<f64>| -> Result<Vec<GridPoint>> {
        par::map(&betas, |&b| pvalue(b).map(|p| GridPoint { beta: b, pvalue: p }))
            .into_iter()
            .collect()
    };

    let mut lo = center - spec.half_width_se * se;
    let mut hi = center + spec.half_width_se * se;
    let n0 = spec.points;
    let mut curve = eval(linspace(lo, hi, n0))?;
    let extra = (n0 / 2).max(2);
    let (mut lower_unbounded, mut upper_unbounded) = (false, false);
    loop {
        curve.sort_by(|a, b| a.beta.total_cmp(&b.beta));
        let first_kept = curve.first().is_some_and(|g| g.pvalue >= alpha);
        let last_kept = curve.last().is_some_and(|g| g.pvalue >= alpha);
        let mut new = Vec::new();
        if first_kept && !lower_unbounded {
            if lo <= -spec.unbounded_at {
                lower_unbounded = true;
            } else {
                let next = (center - (center - lo) * spec.expansion).max(-spec.unbounded_at);
                let mut pts = linspace(next, lo, extra + 1);
                pts.pop();
                new.extend(pts);
                lo = next;
            }
        }
        if last_kept && !upper_unbounded {
            if hi >= spec.unbounded_at {
                upper_unbounded = true;
            } else {
                let next = (center + (hi - center) * spec.expansion).min(spec.unbounded_at);
                let mut pts = linspace(hi, next, extra + 1);
                pts.remove(0);
                new.extend(pts);
                hi = next;
            }
        }
        if new.is_empty() {
            break;
        }
        curve.extend(eval(new)?);
    }
    if (lower_unbounded || upper_unbounded) && !spec.allow_unbounded {
        return Err(Error::GridExhausted { limit: spec.unbounded_at });
    }

    let kept: Vec<usize> = (0..curve.len()).filter(|&i| curve[i].pvalue >= alpha).collect();
    let Some((&i_lo, &i_hi)) = kept.first().zip(kept.last()) else {
        let best = curve
            .iter()
            .max_by(|a, b| a.pvalue.total_cmp(&b.pvalue))
            .map(|g| g.beta)
            .unwrap_or(center);
        return Ok(Inversion {
            interval: ConfidenceInterval {
                lower: best,
                upper: best,
                lower_unbounded: false,
                upper_unbounded: false,
                empty: true,
                convex: true,
            },
            curve,
        });
    };
    let convex = (i_lo..=i_hi).all(|i| curve[i].pvalue >= alpha);

    let mut refined = Vec::new();
    let mut bisect = |mut inside: f64, mut outside: f64| -> Result<f64> {
        for _ in 0..spec.refine_steps {
            let mid = 0.5 * (inside + outside);
            let p = pvalue(mid)?;
            refined.push(GridPoint { beta: mid, pvalue: p });
            if p >= alpha {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        Ok(inside)
    };
    let lower = if lower_unbounded || i_lo == 0 {
        curve[i_lo].beta
    } else {
        bisect(curve[i_lo].beta, curve[i_lo - 1].beta)?
    };
    let upper = if upper_unbounded || i_hi + 1 == curve.len() {
        curve[i_hi].beta
    } else {
        bisect(curve[i_hi].beta, curve[i_hi + 1].beta)?
    };
    curve.extend(refined);
    curve.sort_by(|a, b| a.beta.total_cmp(&b.beta));
    Ok(Inversion {
        interval: ConfidenceInterval {
            lower,
            upper,
            lower_unbounded,
            upper_unbounded,
            empty: false,
            convex,
        },
        curve,
    })
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|i| if i + 1 == n { b } else { a + step * i as f64 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TslsConditional,
    ClrConditional,
    LassoConditional,
    Naive,
}

/// Naive and conditional inference for one statistic.
#[derive(Debug, Clone, Serialize)]
pub struct InferenceReport {
    pub method: Method,
    pub statistic: TestKind,
    /// Null value tested for the reported p-values.
    pub beta0: f64,
    pub statistic_value: f64,
    pub alpha: f64,
    pub naive_pvalue: f64,
    pub conditional_pvalue: f64,
    pub naive_ci: ConfidenceInterval,
    pub conditional_ci: ConfidenceInterval,
    /// `beta_hat +- z SE` for the TSLS statistic.
    pub wald_ci: Option<[f64; 2]>,
    pub diagnostics: Option<SamplerDiagnostics>,
    pub notes: Vec<String>,
    pub naive_curve: Vec<GridPoint>,
    pub conditional_curve: Vec<GridPoint>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pvalue_examples() {
        let draws = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(conditional_pvalue(&draws, 2.5, Sided::Upper), 0.5);
        assert_eq!(conditional_pvalue(&draws, f64::NEG_INFINITY, Sided::Upper), 1.0);
        assert_eq!(conditional_pvalue(&draws, 5.0, Sided::Upper), 0.0);
        assert_eq!(conditional_pvalue(&draws, 2.5, Sided::TwoSided), 1.0);
        assert_eq!(conditional_pvalue(&draws, 4.0, Sided::TwoSided), 0.5);
    }

    #[test]
    fn normal_wald_inversion_recovers_closed_form() {
        // p(b) = 2 (1 - Phi(|b - 1| / 0.5))
        let pv = |b: f64| Ok(2.0 * crate::distributions::norm_sf(((b - 1.0) / 0.5).abs()));
        let inv = invert(1.0, 0.5, 0.05, &GridSpec { refine_steps: 40, ..GridSpec::default() }, pv).unwrap();
        let z = crate::distributions::norm_quantile(0.975);
        assert!((inv.interval.lower - (1.0 - z * 0.5)).abs() < 1e-8);
        assert!((inv.interval.upper - (1.0 + z * 0.5)).abs() < 1e-8);
        assert!(inv.interval.convex && !inv.interval.empty);
    }

    #[test]
    fn expansion_and_unbounded_flag() {
        // a wide acceptance region forces expansion; a flat one goes unbounded
        let inv = invert(0.0, 1.0, 0.05, &GridSpec::default(), |b| Ok(if b.abs() < 50.0 { 0.5 } else { 0.0 })).unwrap();
        assert!(!inv.interval.lower_unbounded && !inv.interval.upper_unbounded);
        assert!((inv.interval.upper - 50.0).abs() < 0.1);
        let inv = invert(0.0, 1.0, 0.05, &GridSpec::default(), |_| Ok(0.5)).unwrap();
        assert!(inv.interval.lower_unbounded && inv.interval.upper_unbounded);
        assert!(inv.interval.contains(1e9));
        let strict = GridSpec { allow_unbounded: false, ..GridSpec::default() };
        assert!(matches!(invert(0.0, 1.0, 0.05, &strict, |_| Ok(0.5)), Err(Error::GridExhausted { .. })));
    }

    #[test]
    fn alpha_one_gives_degenerate_interval_at_argmax() {
        let inv = invert(0.0, 1.0, 1.0, &GridSpec::default(), |b| Ok((-(b - 0.4).powi(2)).exp() * 0.9)).unwrap();
        assert!(inv.interval.empty);
        assert!((inv.interval.lower - 0.4).abs() < 0.05);
        assert_eq!(inv.interval.lower, inv.interval.upper);
    }

    #[test]
    fn hull_contains_all_kept_points_and_flags_gaps() {
        let pv = |b: f64| Ok(if (b > -3.0 && b < -1.0) || (b > 1.0 && b < 2.0) { 0.5 } else { 0.01 });
        let inv = invert(0.0, 1.0, 0.05, &GridSpec::default(), pv).unwrap();
        assert!(!inv.interval.convex);
        for g in &inv.curve {
            if g.pvalue >= 0.05 {
                assert!(inv.interval.contains(g.beta));
            } else if g.beta < inv.interval.lower || g.beta > inv.interval.upper {
                assert!(!inv.interval.contains(g.beta));
            }
        }
    }
}
