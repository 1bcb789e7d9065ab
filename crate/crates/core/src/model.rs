//! IV data model, Frisch–Waugh–Lovell preparation and point estimators.
//!
//! Every statistic downstream is a function of a handful of cross products
//! (`Z'Z`, `Z'Y`, `Z'D`, `Y'Y`, `Y'D`, `D'D`), collected once in [`Moments`].
//! The `P_Z` quadratic forms are evaluated as `a' (Z'Z)^{-1} b` rather than by
//! materializing the `n x n` projection.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

/// Outcome, treatment, instruments and optional exogenous covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct IVDataset {
    pub y: DVector<f64>,
    pub d: DVector<f64>,
    pub z: DMatrix<f64>,
    pub x: Option<DMatrix<f64>>,
    pub instrument_names: Vec<String>,
    pub covariate_names: Vec<String>,
    /// Exogenous columns (intercept included) already projected out of the
    /// data; they count against the residual degrees of freedom.
    pub absorbed: usize,
}

impl IVDataset {
    /// Builds a dataset, checking that the row counts agree. Column names
    /// default to `z1..zp` and `x1..xk`.
    pub fn new(
        y: DVector<f64>,
        d: DVector<f64>,
        z: DMatrix<f64>,
        x: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if d.len() != n || z.nrows() != n {
            return Err(Error::Dimension(format!(
                "y has {n} rows, d has {}, z has {}",
                d.len(),
                z.nrows()
            )));
        }
        if let Some(x) = &x {
            if x.nrows() != n {
                return Err(Error::Dimension(format!(
                    "y has {n} rows, x has {}",
                    x.nrows()
                )));
            }
        }
        if z.ncols() == 0 {
            return Err(Error::Dimension("at least one instrument is required".into()));
        }
        let instrument_names = (1..=z.ncols()).map(|j| format!("z{j}")).collect();
        let covariate_names = x
            .as_ref()
            .map(|x| (1..=x.ncols()).map(|j| format!("x{j}")).collect())
            .unwrap_or_default();
        Ok(Self {
            y,
            d,
            z,
            x,
            instrument_names,
            covariate_names,
            absorbed: 0,
        })
    }

    pub fn with_names(mut self, instruments: Vec<String>, covariates: Vec<String>) -> Result<Self> {
        if instruments.len() != self.z.ncols() {
            return Err(Error::Dimension(format!(
                "{} instrument names for {} columns",
                instruments.len(),
                self.z.ncols()
            )));
        }
        let k = self.x.as_ref().map_or(0, |x| x.ncols());
        if covariates.len() != k {
            return Err(Error::Dimension(format!(
                "{} covariate names for {k} columns",
                covariates.len()
            )));
        }
        self.instrument_names = instruments;
        self.covariate_names = covariates;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    /// Dataset restricted to a subset of instrument columns.
    pub fn select_instruments(&self, cols: &[usize]) -> Self {
        Self {
            y: self.y.clone(),
            d: self.d.clone(),
            z: self.z.select_columns(cols),
            x: self.x.clone(),
            instrument_names: cols.iter().map(|&j| self.instrument_names[j].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            absorbed: self.absorbed,
        }
    }
}

/// Projects the intercept and `X` out of `Y`, `D` and every column of `Z`,
/// returning a centered, covariate-free dataset.
pub fn prepare(raw: &IVDataset) -> Result<IVDataset> {
    let n = raw.n();
    let p = raw.p();
    let k = raw.x.as_ref().map_or(0, |x| x.ncols());
    if raw.d.len() != n || raw.z.nrows() != n {
        return Err(Error::Dimension("inconsistent row counts".into()));
    }
    if n <= p + k {
        return Err(Error::Dimension(format!(
            "need n > p + k, got n = {n}, p = {p}, k = {k}"
        )));
    }
    let names: Vec<String> = raw
        .instrument_names
        .iter()
        .chain(raw.covariate_names.iter())
        .cloned()
        .collect();

    let zx = match &raw.x {
        Some(x) => {
            let mut m = DMatrix::zeros(n, p + k);
            m.columns_mut(0, p).copy_from(&raw.z);
            m.columns_mut(p, k).copy_from(x);
            m
        }
        None => raw.z.clone(),
    };
    linalg::full_rank_check(&zx).map_err(|cols| Error::RankDeficient {
        columns: cols.iter().map(|&j| names[j].clone()).collect(),
    })?;

    // exogenous block: intercept plus X; columns of X already spanned by the
    // intercept (e.g. a constant column) are dropped
    let mut w = DMatrix::from_element(n, 1 + k, 1.0);
    if let Some(x) = &raw.x {
        w.columns_mut(1, k).copy_from(x);
    }
    let basis = linalg::gram_schmidt(&w, 1e-9).q;

    let y = linalg::residualize(&basis, &raw.y);
    let d = linalg::residualize(&basis, &raw.d);
    let mut z = DMatrix::zeros(n, p);
    for j in 0..p {
        let col = raw.z.column(j).into_owned();
        z.set_column(j, &linalg::residualize(&basis, &col));
    }
    linalg::full_rank_check(&z).map_err(|cols| Error::RankDeficient {
        columns: cols.iter().map(|&j| raw.instrument_names[j].clone()).collect(),
    })?;

    Ok(IVDataset {
        y,
        d,
        z,
        x: None,
        instrument_names: raw.instrument_names.clone(),
        covariate_names: Vec::new(),
        absorbed: raw.absorbed + basis.ncols(),
    })
}

/// `S = (Z'Z)^{-1/2} Z'D`, the first-stage sufficient statistic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficientS(pub DVector<f64>);

impl SufficientS {
    pub fn norm_sq(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Cross products of a prepared dataset.
#[derive(Debug, Clone)]
pub struct Moments {
    pub n: usize,
    pub p: usize,
    pub absorbed: usize,
    pub ztz: DMatrix<f64>,
    pub ztz_inv_sqrt: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    pub zty: DVector<f64>,
    pub ztd: DVector<f64>,
    pub yty: f64,
    pub ytd: f64,
    pub dtd: f64,
}

impl Moments {
    pub fn from_data(data: &IVDataset) -> Result<Self> {
        let zt = data.z.transpose();
        let ztz = &zt * &data.z;
        let zty = &zt * &data.y;
        let ztd = &zt * &data.d;
        let m = Self::from_cross_products(
            data.n(),
            ztz,
            zty,
            ztd,
            data.y.norm_squared(),
            data.y.dot(&data.d),
            data.d.norm_squared(),
        )?;
        m.with_absorbed(data.absorbed)
    }

    /// Declares `k` exogenous columns already projected out of the cross
    /// products.
    pub fn with_absorbed(mut self, k: usize) -> Result<Self> {
        if self.n <= self.p + k {
            return Err(Error::Dimension(format!(
                "need n > p + k, got n = {}, p = {}, k = {k}",
                self.n, self.p
            )));
        }
        self.absorbed = k;
        Ok(self)
    }

    pub fn from_cross_products(
        n: usize,
        ztz: DMatrix<f64>,
        zty: DVector<f64>,
        ztd: DVector<f64>,
        yty: f64,
        ytd: f64,
        dtd: f64,
    ) -> Result<Self> {
        let p = ztz.nrows();
        if n <= p {
            return Err(Error::Dimension(format!("need n > p, got n = {n}, p = {p}")));
        }
        let chol = Cholesky::new(ztz.clone()).ok_or_else(|| Error::RankDeficient {
            columns: vec!["Z'Z is not positive definite".into()],
        })?;
        let ztz_inv_sqrt = linalg::sym_inv_sqrt(&ztz);
        Ok(Self {
            n,
            p,
            absorbed: 0,
            ztz,
            ztz_inv_sqrt,
            chol,
            zty,
            ztd,
            yty,
            ytd,
            dtd,
        })
    }

    /// Residual degrees of freedom `n - p - k`.
    pub fn dof(&self) -> f64 {
        (self.n - self.p - self.absorbed) as f64
    }

    /// `a' (Z'Z)^{-1} b`.
    pub fn quad(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(&self.chol.solve(b))
    }

    pub fn ypzy(&self) -> f64 {
        self.quad(&self.zty, &self.zty)
    }

    pub fn ypzd(&self) -> f64 {
        self.quad(&self.zty, &self.ztd)
    }

    pub fn dpzd(&self) -> f64 {
        self.quad(&self.ztd, &self.ztd)
    }

    /// `(Z'Z)^{-1} Z'D`.
    pub fn gamma_hat(&self) -> DVector<f64> {
        self.chol.solve(&self.ztd)
    }

    pub fn ztz_inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn sufficient_s(&self) -> SufficientS {
        SufficientS(&self.ztz_inv_sqrt * &self.ztd)
    }

    /// First-stage residual sum of squares `D'(I - P_Z)D`.
    pub fn first_stage_rss(&self) -> f64 {
        (self.dtd - self.dpzd()).max(0.0)
    }

    /// `(Z'Z)^{-1/2} [Z'Y, Z'D]`, a `p x 2` matrix.
    pub fn whitened_reduced_form(&self) -> DMatrix<f64> {
        let mut yt = DMatrix::zeros(self.p, 2);
        yt.set_column(0, &self.zty);
        yt.set_column(1, &self.ztd);
        &self.ztz_inv_sqrt * yt
    }

    /// Reduced-form residual covariance
    /// `Omega = [Y D]' P_{Z-perp} [Y D] / (n - p)`.
    pub fn omega_hat(&self) -> Matrix2<f64> {
        let dof = self.dof();
        let o11 = (self.yty - self.ypzy()) / dof;
        let o12 = (self.ytd - self.ypzd()) / dof;
        let o22 = (self.dtd - self.dpzd()) / dof;
        Matrix2::new(o11, o12, o12, o22)
    }

    /// Moments for the sub-design using only instrument columns `cols`.
    pub fn select(&self, cols: &[usize]) -> Result<Self> {
        let ztz = self.ztz.select_rows(cols).select_columns(cols);
        let zty = self.zty.select_rows(cols);
        let ztd = self.ztd.select_rows(cols);
        Self::from_cross_products(self.n, ztz, zty, ztd, self.yty, self.ytd, self.dtd)?.with_absorbed(self.absorbed)
    }
}

/// Explicit `P_Z = Z (Z'Z)^{-1} Z'`; only sensible for small `n`.
pub fn projection_matrix(z: &DMatrix<f64>) -> DMatrix<f64> {
    let ztz = z.transpose() * z;
    let inv = ztz.try_inverse().expect("Z'Z must be invertible");
    z * inv * z.transpose()
}

/// Point estimates consumed by the test statistics.
#[derive(Debug, Clone, Serialize)]
pub struct ModelEstimates {
    /// Null value at which `sigma_hat` is evaluated.
    pub beta0: f64,
    pub beta_tsls: f64,
    #[serde(serialize_with = "crate::report::ser_matrix2")]
    pub omega_hat: Matrix2<f64>,
    #[serde(serialize_with = "crate::report::ser_matrix2")]
    pub sigma_hat: Matrix2<f64>,
    #[serde(with = "crate::report::dvec")]
    pub gamma_hat: DVector<f64>,
}

const DEGENERATE_TOL: f64 = 1e-12;

pub(crate) fn check_first_stage(m: &Moments) -> Result<f64> {
    let dpzd = m.dpzd();
    if !(dpzd > DEGENERATE_TOL * m.dtd.max(1.0)) {
        return Err(Error::DegenerateFirstStage { value: dpzd });
    }
    Ok(dpzd)
}

/// `D'P_Z Y / D'P_Z D`.
pub fn tsls_from_moments(m: &Moments) -> Result<f64> {
    let dpzd = check_first_stage(m)?;
    Ok(m.ypzd() / dpzd)
}

pub fn tsls_estimate(data: &IVDataset) -> Result<f64> {
    tsls_from_moments(&Moments::from_data(data)?)
}

/// Conventional standard error of the TSLS estimate,
/// `sqrt(Sigma_11(beta_tsls) / D'P_Z D)`.
pub fn tsls_standard_error(m: &Moments) -> Result<f64> {
    let beta = tsls_from_moments(m)?;
    let sigma = linalg::sigma_from_omega(&m.omega_hat(), beta);
    Ok((sigma[(0, 0)] / m.dpzd()).sqrt())
}

pub fn estimates_from_moments(m: &Moments, beta0: f64) -> Result<ModelEstimates> {
    let beta_tsls = tsls_from_moments(m)?;
    let omega_hat = m.omega_hat();
    if !linalg::is_pd2(&omega_hat) {
        return Err(Error::NotPositiveDefinite(format!("Omega = {omega_hat:?}")));
    }
    let sigma_hat = linalg::sigma_from_omega(&omega_hat, beta0);
    if !linalg::is_pd2(&sigma_hat) {
        return Err(Error::NotPositiveDefinite(format!(
            "Sigma({beta0}) = {sigma_hat:?}"
        )));
    }
    Ok(ModelEstimates {
        beta0,
        beta_tsls,
        omega_hat,
        sigma_hat,
        gamma_hat: m.gamma_hat(),
    })
}

/// `Omega`, `Sigma(beta0)` and `gamma` estimates for a prepared dataset.
pub fn covariance_estimates(data: &IVDataset, beta0: f64) -> Result<ModelEstimates> {
    estimates_from_moments(&Moments::from_data(data)?, beta0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rng: &mut ChaCha20Rng, n: usize, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng))
    }

    fn random_vector(rng: &mut ChaCha20Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
    }

    fn centered(v: &DVector<f64>) -> DVector<f64> {
        v.add_scalar(-v.mean())
    }

    #[test]
    fn prepare_leaves_centered_data_unchanged() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let y = centered(&random_vector(&mut rng, 30));
        let d = centered(&random_vector(&mut rng, 30));
        let mut z = random_matrix(&mut rng, 30, 2);
        for j in 0..2 {
            let c = centered(&z.column(j).into_owned());
            z.set_column(j, &c);
        }
        let raw = IVDataset::new(y.clone(), d.clone(), z.clone(), None).unwrap();
        let out = prepare(&raw).unwrap();
        assert!((out.y - y).amax() < 1e-12);
        assert!((out.d - d).amax() < 1e-12);
        assert!((out.z - z).amax() < 1e-12);
    }

    #[test]
    fn constant_covariate_is_plain_centering() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let y = random_vector(&mut rng, 25).add_scalar(3.0);
        let d = random_vector(&mut rng, 25).add_scalar(-1.0);
        let z = random_matrix(&mut rng, 25, 2).add_scalar(0.5);
        let x = DMatrix::from_element(25, 1, 7.0);
        let raw = IVDataset::new(y.clone(), d.clone(), z.clone(), Some(x)).unwrap();
        let out = prepare(&raw).unwrap();
        assert!((out.y - centered(&y)).amax() < 1e-12);
        assert!((out.d - centered(&d)).amax() < 1e-12);
        for j in 0..2 {
            let want = centered(&z.column(j).into_owned());
            assert!((out.z.column(j) - want).amax() < 1e-12);
        }
        assert!(out.x.is_none());
    }

    #[test]
    fn prepare_matches_normal_equations_residuals() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (n, k) = (50, 3);
        let x = random_matrix(&mut rng, n, k);
        let z = random_matrix(&mut rng, n, 2) + &x.columns(0, 2) * 0.3;
        let y = random_vector(&mut rng, n) + x.column(1) * 2.0;
        let d = random_vector(&mut rng, n) - x.column(2);
        let raw = IVDataset::new(y.clone(), d.clone(), z.clone(), Some(x.clone())).unwrap();
        let out = prepare(&raw).unwrap();

        // oracle: W = [1 X], residual = v - W (W'W)^{-1} W'v
        let mut w = DMatrix::from_element(n, k + 1, 1.0);
        w.columns_mut(1, k).copy_from(&x);
        let wtw_inv = (w.transpose() * &w).try_inverse().unwrap();
        let resid = |v: &DVector<f64>| v - &w * (&wtw_inv * (w.transpose() * v));
        assert!((&out.y - resid(&y)).amax() < 1e-10);
        assert!((&out.d - resid(&d)).amax() < 1e-10);
        for j in 0..2 {
            let col = z.column(j).into_owned();
            assert!((out.z.column(j) - resid(&col)).amax() < 1e-10);
            assert!(out.z.column(j).mean().abs() < 1e-10);
        }
        assert!(out.y.mean().abs() < 1e-10 && out.d.mean().abs() < 1e-10);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let z = random_matrix(&mut rng, 20, 2);
        let mut x = DMatrix::zeros(20, 1);
        x.set_column(0, &(z.column(0) * 2.0));
        let raw = IVDataset::new(random_vector(&mut rng, 20), random_vector(&mut rng, 20), z, Some(x))
            .unwrap()
            .with_names(vec!["near".into(), "far".into()], vec!["dup".into()])
            .unwrap();
        match prepare(&raw) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec!["dup".to_string()]),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let r = IVDataset::new(
            DVector::zeros(5),
            DVector::zeros(4),
            DMatrix::zeros(5, 1),
            None,
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn tsls_exact_fit_and_zero_numerator() {
        let z = DMatrix::from_column_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
        let d = z.column(0).into_owned();
        let data = IVDataset::new(&d * 2.0, d.clone(), z.clone(), None).unwrap();
        assert!((tsls_estimate(&data).unwrap() - 2.0).abs() < 1e-14);
        let data = IVDataset::new(DVector::zeros(4), d, z, None).unwrap();
        assert_eq!(tsls_estimate(&data).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_first_stage_is_an_error() {
        let z = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let d = DVector::from_column_slice(&[1.0, 1.0, -1.0, -1.0]);
        let data = IVDataset::new(d.clone(), d, z, None).unwrap();
        assert!(matches!(
            tsls_estimate(&data),
            Err(Error::DegenerateFirstStage { .. })
        ));
    }

    #[test]
    fn sigma_at_zero_is_omega_and_mapping_holds() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let z = random_matrix(&mut rng, 60, 3);
        let d = &z * DVector::from_element(3, 0.5) + random_vector(&mut rng, 60);
        let y = &d * 0.7 + random_vector(&mut rng, 60);
        let data = prepare(&IVDataset::new(y.clone(), d.clone(), z, None).unwrap()).unwrap();
        let e0 = covariance_estimates(&data, 0.0).unwrap();
        assert_eq!(e0.sigma_hat, e0.omega_hat);

        let beta0 = 1.3;
        let est = covariance_estimates(&data, beta0).unwrap();
        let b = linalg::reduced_form_map(beta0);
        let binv = linalg::inv2(&b).unwrap();
        let mapped = binv * est.omega_hat * binv.transpose();
        assert!((mapped - est.sigma_hat).amax() < 1e-10);

        // direct residual computation of Sigma(beta0)
        let pz = projection_matrix(&data.z);
        let resid = DMatrix::identity(60, 60) - pz;
        let e = &data.y - &data.d * beta0;
        let dof = 56.0;
        let s11 = (e.transpose() * &resid * &e)[0] / dof;
        let s12 = (e.transpose() * &resid * &data.d)[0] / dof;
        let s22 = (data.d.transpose() * &resid * &data.d)[0] / dof;
        assert!((est.sigma_hat - Matrix2::new(s11, s12, s12, s22)).amax() < 1e-10);
        assert!((est.omega_hat - est.omega_hat.transpose()).amax() < 1e-12);
        assert!(linalg::is_pd2(&est.omega_hat));
    }

    #[test]
    fn projections_are_idempotent_and_complementary() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let z = random_matrix(&mut rng, 40, 4);
        let pz = projection_matrix(&z);
        assert!((&pz * &pz - &pz).amax() < 1e-10);
        let perp = DMatrix::identity(40, 40) - &pz;
        assert!((&pz + &perp - DMatrix::identity(40, 40)).amax() < 1e-14);
        assert!((&pz * &perp).amax() < 1e-10);
    }

    #[test]
    fn s_norm_matches_dpzd() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let z = random_matrix(&mut rng, 80, 5);
        let d = random_vector(&mut rng, 80) + z.column(2);
        let data = IVDataset::new(random_vector(&mut rng, 80), d.clone(), z.clone(), None).unwrap();
        let m = Moments::from_data(&data).unwrap();
        let explicit = (d.transpose() * projection_matrix(&z) * &d)[0];
        let s = m.sufficient_s();
        assert!((s.norm_sq() - explicit).abs() < 1e-8 * explicit);
        assert!((m.dpzd() - explicit).abs() < 1e-8 * explicit);
    }

    #[test]
    fn sigma_hat_tracks_truth_across_replications() {
        // n = 200, p = 3, Sigma* = [[1, .8], [.8, 1]], 500 replications
        let sigma_star = Matrix2::new(1.0, 0.8, 0.8, 1.0);
        let chol = sigma_star.cholesky().unwrap().l();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let reps = 500;
        let mut sums = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..reps {
            let z = random_matrix(&mut rng, 200, 3);
            let mut y = DVector::zeros(200);
            let mut d = DVector::zeros(200);
            for i in 0..200 {
                let e = chol * nalgebra::Vector2::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                d[i] = 0.3 * z.row(i).sum() + e[1];
                y[i] = d[i] + e[0];
            }
            let data = prepare(&IVDataset::new(y, d, z, None).unwrap()).unwrap();
            let s = covariance_estimates(&data, 1.0).unwrap().sigma_hat;
            for (k, v) in [s[(0, 0)], s[(0, 1)], s[(1, 1)]].into_iter().enumerate() {
                sums[k] += v;
                sq[k] += v * v;
            }
        }
        let truth = [1.0, 0.8, 1.0];
        for k in 0..3 {
            let mean = sums[k] / reps as f64;
            let var = sq[k] / reps as f64 - mean * mean;
            let mcse = (var / reps as f64).sqrt();
            assert!(
                (mean - truth[k]).abs() < 3.0 * mcse,
                "entry {k}: mean {mean}, mcse {mcse}"
            );
        }
    }
}
