//! TSLS Wald, Anderson–Rubin and CLR statistics with their naive
//! (unconditional) reference distributions.

use nalgebra::{DVector, Matrix2, Vector2};
use serde::Serialize;

use crate::clr::{clr_tail, QuadratureConfig};
use crate::distributions::{f_sf, norm_sf};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{check_first_stage, ModelEstimates, Moments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Tsls,
    Ar,
    Clr,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestValue {
    pub statistic: f64,
    pub kind: TestKind,
    pub beta0: f64,
    pub naive_pvalue: f64,
}

/// CLR sufficient statistics `(U, R)` and their Gram matrix `Q`.
#[derive(Debug, Clone, Serialize)]
pub struct ClrComponents {
    #[serde(with = "crate::report::dvec")]
    pub u_hat: DVector<f64>,
    #[serde(with = "crate::report::dvec")]
    pub r_hat: DVector<f64>,
    pub q_u: f64,
    pub q_ur: f64,
    pub q_r: f64,
    pub a0: [f64; 2],
    pub b0: [f64; 2],
}

impl ClrComponents {
    pub fn q_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.q_u, self.q_ur, self.q_ur, self.q_r)
    }

    pub fn lr(&self) -> f64 {
        lr_statistic(self.q_u, self.q_r, self.q_ur)
    }
}

/// `LR = (Q_U - Q_R + sqrt((Q_U + Q_R)^2 - 4(Q_U Q_R - Q_UR^2))) / 2`, with
/// the discriminant rewritten as `(Q_U - Q_R)^2 + 4 Q_UR^2` so it cannot go
/// negative in floating point.
pub fn lr_statistic(q_u: f64, q_r: f64, q_ur: f64) -> f64 {
    let diff = q_u - q_r;
    let disc = diff * diff + 4.0 * q_ur * q_ur;
    (0.5 * (diff + disc.sqrt())).max(0.0)
}

/// Raw TSLS statistic `D'P_Z(Y - D b0) / (sqrt(Sigma_11) sqrt(D'P_Z D))`.
pub fn tsls_statistic(m: &Moments, beta0: f64, sigma11: f64) -> Result<f64> {
    let dpzd = check_first_stage(m)?;
    if !(sigma11 > 0.0) {
        return Err(Error::NotPositiveDefinite(format!("Sigma_11 = {sigma11}")));
    }
    Ok((m.ypzd() - beta0 * dpzd) / (sigma11.sqrt() * dpzd.sqrt()))
}

/// TSLS Wald test with a two-sided standard-normal p-value.
pub fn tsls_stat(m: &Moments, beta0: f64, est: &ModelEstimates) -> Result<TestValue> {
    let t = tsls_statistic(m, beta0, est.sigma_hat[(0, 0)])?;
    Ok(TestValue {
        statistic: t,
        kind: TestKind::Tsls,
        beta0,
        naive_pvalue: (2.0 * norm_sf(t.abs())).min(1.0),
    })
}

/// Anderson–Rubin statistic with its `F(p, n - p)` upper-tail p-value.
pub fn ar_stat(m: &Moments, beta0: f64) -> Result<TestValue> {
    // e = Y - D b0
    let zte = &m.zty - &m.ztd * beta0;
    let epze = m.quad(&zte, &zte);
    let ete = m.yty - 2.0 * beta0 * m.ytd + beta0 * beta0 * m.dtd;
    let resid = ete - epze;
    let scale = ete.abs().max(f64::MIN_POSITIVE);
    if !(resid > 1e-14 * scale) {
        return Err(Error::ZeroResidual("Anderson-Rubin denominator"));
    }
    let p = m.p as f64;
    let stat = ((epze / p) / (resid / m.dof())).max(0.0);
    Ok(TestValue {
        statistic: stat,
        kind: TestKind::Ar,
        beta0,
        naive_pvalue: f_sf(stat, p, m.dof()),
    })
}

/// `U`, `R` and `Q` at `beta0` with a plug-in reduced-form covariance.
pub fn clr_components(m: &Moments, beta0: f64, omega: &Matrix2<f64>) -> Result<ClrComponents> {
    let a0 = Vector2::new(beta0, 1.0);
    let b0 = Vector2::new(1.0, -beta0);
    let omega_inv = linalg::inv2(omega)
        .ok_or_else(|| Error::NotPositiveDefinite(format!("Omega = {omega:?}")))?;
    let b_om_b = (b0.transpose() * omega * b0)[0];
    let oinv_a = omega_inv * a0;
    let a_oinv_a = a0.dot(&oinv_a);
    if !(b_om_b > 0.0) || !(a_oinv_a > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "b0'Omega b0 = {b_om_b}, a0'Omega^-1 a0 = {a_oinv_a}"
        )));
    }
    let yt = m.whitened_reduced_form();
    let u_hat = (&yt * nalgebra::DVector::from_column_slice(b0.as_slice())) / b_om_b.sqrt();
    let r_hat = (&yt * nalgebra::DVector::from_column_slice(oinv_a.as_slice())) / a_oinv_a.sqrt();
    Ok(ClrComponents {
        q_u: u_hat.norm_squared(),
        q_r: r_hat.norm_squared(),
        q_ur: u_hat.dot(&r_hat),
        u_hat,
        r_hat,
        a0: [beta0, 1.0],
        b0: [1.0, -beta0],
    })
}

/// Plug-in CLR statistic with the naive conditional-on-`Q_R` p-value.
pub fn clr_stat(
    m: &Moments,
    beta0: f64,
    est: &ModelEstimates,
    quad: &QuadratureConfig,
) -> Result<(TestValue, ClrComponents)> {
    let comps = clr_components(m, beta0, &est.omega_hat)?;
    let lr = comps.lr();
    let naive = clr_tail(lr, comps.q_r, m.p, None, quad)?;
    Ok((
        TestValue {
            statistic: lr,
            kind: TestKind::Clr,
            beta0,
            naive_pvalue: naive,
        },
        comps,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::ks_statistic;
    use crate::model::{estimates_from_moments, prepare, tsls_from_moments, IVDataset};
    use crate::rng::substream;
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, StandardNormal};
    use statrs::distribution::{ContinuousCDF, FisherSnedecor};

    fn simulate(seed: u64, n: usize, p: usize, gamma: f64, s12: f64, beta: f64) -> IVDataset {
        let mut rng = substream(seed, &[0]);
        let z = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let mut y = DVector::zeros(n);
        let mut d = DVector::zeros(n);
        let c = (1.0 - s12 * s12).sqrt();
        for i in 0..n {
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            let xi = e2;
            let delta = s12 * e2 + c * e1;
            d[i] = gamma * z.row(i).sum() + xi;
            y[i] = d[i] * beta + delta;
        }
        prepare(&IVDataset::new(y, d, z, None).unwrap()).unwrap()
    }

    #[test]
    fn tsls_stat_vanishes_at_tsls_root() {
        let data = simulate(1, 100, 3, 0.4, 0.5, 1.0);
        let m = Moments::from_data(&data).unwrap();
        let b = tsls_from_moments(&m).unwrap();
        let est = estimates_from_moments(&m, b).unwrap();
        let t = tsls_stat(&m, b, &est).unwrap();
        assert!(t.statistic.abs() < 1e-10);
        assert!((t.naive_pvalue - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ar_hand_instance() {
        // Z = (-1, 0, 1), Y - D b0 = (-2, 1, 1) with b0 = 0; both already
        // centered, so preparation only absorbs the intercept (dof = 1)
        let z = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let y = DVector::from_column_slice(&[-2.0, 1.0, 1.0]);
        let d = DVector::from_column_slice(&[1.0, 0.5, -1.0]);
        let data = crate::model::prepare(&IVDataset::new(y, d, z, None).unwrap()).unwrap();
        let m = Moments::from_data(&data).unwrap();
        let ar = ar_stat(&m, 0.0).unwrap();
        assert!((ar.statistic - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ar_zero_when_residual_orthogonal_to_instruments() {
        let z = DMatrix::from_column_slice(4, 1, &[-1.0, -1.0, 1.0, 1.0]);
        let d = DVector::from_column_slice(&[-1.0, -2.0, 1.0, 2.0]);
        // e = (1, -1, 1, -1) is orthogonal to Z
        let e = DVector::from_column_slice(&[1.0, -1.0, 1.0, -1.0]);
        let y = &d * 0.5 + &e;
        let m = Moments::from_data(&IVDataset::new(y, d, z, None).unwrap()).unwrap();
        let ar = ar_stat(&m, 0.5).unwrap();
        assert!(ar.statistic.abs() < 1e-12);
        assert!((ar.naive_pvalue - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lr_collapses_when_q_ur_is_zero() {
        assert!((lr_statistic(5.0, 2.0, 0.0) - 3.0).abs() < 1e-14);
        assert_eq!(lr_statistic(2.0, 5.0, 0.0), 0.0);
    }

    #[test]
    fn clr_components_are_consistent() {
        let data = simulate(2, 150, 4, 0.2, 0.6, 0.5);
        let m = Moments::from_data(&data).unwrap();
        let est = estimates_from_moments(&m, 0.3).unwrap();
        let c = clr_components(&m, 0.3, &est.omega_hat).unwrap();
        assert!((c.q_u - c.u_hat.norm_squared()).abs() < 1e-10);
        assert!((c.q_r - c.r_hat.norm_squared()).abs() < 1e-10);
        assert!((c.q_ur - c.u_hat.dot(&c.r_hat)).abs() < 1e-10);
        let q = c.q_matrix();
        assert!(q[(0, 0)] * q[(1, 1)] - q[(0, 1)] * q[(0, 1)] >= -1e-10);
        assert!(c.lr() >= 0.0);
    }

    #[test]
    fn statistics_invariant_to_instrument_recombination() {
        let data = simulate(3, 120, 3, 0.3, 0.5, 1.0);
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -1.0, 0.0, 1.5, 0.2, 0.4, 0.0, 0.7]);
        let mut mixed = data.clone();
        mixed.z = &data.z * &a;
        let m1 = Moments::from_data(&data).unwrap();
        let m2 = Moments::from_data(&mixed).unwrap();
        assert!((tsls_from_moments(&m1).unwrap() - tsls_from_moments(&m2).unwrap()).abs() < 1e-8);
        let beta0 = 0.7;
        let e1 = estimates_from_moments(&m1, beta0).unwrap();
        let e2 = estimates_from_moments(&m2, beta0).unwrap();
        let t1 = tsls_stat(&m1, beta0, &e1).unwrap().statistic;
        let t2 = tsls_stat(&m2, beta0, &e2).unwrap().statistic;
        assert!((t1 - t2).abs() < 1e-8);
        let a1 = ar_stat(&m1, beta0).unwrap().statistic;
        let a2 = ar_stat(&m2, beta0).unwrap().statistic;
        assert!((a1 - a2).abs() < 1e-8);

        // CLR under an orthonormal recombination
        let (q, _) = nalgebra::linalg::QR::new(a).unpack();
        let mut rotated = data.clone();
        rotated.z = &data.z * q;
        let m3 = Moments::from_data(&rotated).unwrap();
        let c1 = clr_components(&m1, beta0, &e1.omega_hat).unwrap().lr();
        let c3 = clr_components(&m3, beta0, &e1.omega_hat).unwrap().lr();
        assert!((c1 - c3).abs() < 1e-8);
    }

    #[test]
    fn ar_is_minimized_at_its_argmin_on_a_grid() {
        let data = simulate(4, 200, 2, 0.5, 0.3, 1.0);
        let m = Moments::from_data(&data).unwrap();
        let grid: Vec<f64> = (0..4001).map(|i| 0.0 + 2.0 * i as f64 / 4000.0).collect();
        let vals: Vec<f64> = grid.iter().map(|&b| ar_stat(&m, b).unwrap().statistic).collect();
        let (imin, vmin) = vals
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, v)| (i, *v))
            .unwrap();
        // local refinement by golden section around the grid minimizer
        let (mut lo, mut hi) = (grid[imin.saturating_sub(1)], grid[(imin + 1).min(4000)]);
        let f = |b: f64| ar_stat(&m, b).unwrap().statistic;
        for _ in 0..80 {
            let m1 = lo + (hi - lo) * 0.382;
            let m2 = lo + (hi - lo) * 0.618;
            if f(m1) < f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let best = f(0.5 * (lo + hi));
        assert!(best <= vmin + 1e-12);
        assert!(vals.iter().all(|&v| v >= best - 1e-12));
    }

    #[test]
    fn ar_null_distribution_is_f() {
        // n = 200, p = 5, 1000 null replications
        let reps = 1000;
        let mut stats = Vec::with_capacity(reps);
        for r in 0..reps {
            let data = simulate(1000 + r as u64, 200, 5, 0.05, 0.8, 1.0);
            let m = Moments::from_data(&data).unwrap();
            stats.push(ar_stat(&m, 1.0).unwrap().statistic);
        }
        // centering costs one degree of freedom
        let f = FisherSnedecor::new(5.0, 194.0).unwrap();
        let ks = ks_statistic(&stats, |x| f.cdf(x));
        assert!(ks < 0.08, "KS = {ks}");
    }

    #[test]
    fn tsls_null_distribution_is_normal_with_strong_instruments() {
        let reps = 1000;
        let mut stats = Vec::with_capacity(reps);
        for r in 0..reps {
            let data = simulate(5000 + r as u64, 500, 3, 0.5, 0.5, 1.0);
            let m = Moments::from_data(&data).unwrap();
            let est = estimates_from_moments(&m, 1.0).unwrap();
            stats.push(tsls_stat(&m, 1.0, &est).unwrap().statistic);
        }
        let ks = ks_statistic(&stats, crate::distributions::norm_cdf);
        assert!(ks < 0.08, "KS = {ks}");
    }
}
