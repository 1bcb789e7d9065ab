//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};

/// Eigenvalues below this are floored before taking (inverse) square roots.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Relative singular-value threshold for declaring a design rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Symmetric square root `M^{1/2}` of a symmetric PSD matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_power(m, 0.5)
}

/// Symmetric inverse square root `M^{-1/2}` via eigendecomposition.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_power(m, -0.5)
}

fn sym_power(m: &DMatrix<f64>, power: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig
        .eigenvalues
        .map(|v| v.max(EIGEN_FLOOR).powf(power));
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&vals) * q.transpose()
}

/// Ratio of smallest to largest singular value (0 for an empty or zero matrix).
pub fn inverse_condition(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 0 {
        return 1.0;
    }
    let sv = m.singular_values();
    let max = sv.max();
    if max <= 0.0 {
        return 0.0;
    }
    sv.min() / max
}

/// Result of a modified Gram–Schmidt pass over the columns of a matrix.
pub struct GramSchmidt {
    /// Orthonormal basis of the column space (dependent columns skipped).
    pub q: DMatrix<f64>,
    /// Upper-triangular factor over all input columns; `A = Q_full R`.
    pub r: DMatrix<f64>,
    /// Columns numerically in the span of the preceding ones.
    pub dependent: Vec<usize>,
}

/// Modified Gram–Schmidt with re-orthogonalization. A column is dependent
/// when its residual norm falls below `tol` times its original norm.
pub fn gram_schmidt(m: &DMatrix<f64>, tol: f64) -> GramSchmidt {
    let (n, k) = m.shape();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut owner: Vec<usize> = Vec::with_capacity(k);
    let mut r = DMatrix::zeros(k, k);
    let mut dependent = Vec::new();
    for j in 0..k {
        let col = m.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for _ in 0..2 {
            for (q, &i) in basis.iter().zip(&owner) {
                let c = q.dot(&v);
                r[(i, j)] += c;
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        r[(j, j)] = norm;
        if norm0 == 0.0 || norm <= tol * norm0 {
            dependent.push(j);
        } else {
            basis.push(v / norm);
            owner.push(j);
        }
    }
    let q = if basis.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&basis)
    };
    GramSchmidt { q, r, dependent }
}

/// Checks full column rank on the column-equilibrated matrix. On failure
/// returns the indices of the offending columns.
pub fn full_rank_check(m: &DMatrix<f64>) -> std::result::Result<(), Vec<usize>> {
    let k = m.ncols();
    if k == 0 {
        return Ok(());
    }
    let mut scaled = m.clone();
    let mut zero_cols = Vec::new();
    for j in 0..k {
        let nrm = scaled.column(j).norm();
        if nrm == 0.0 {
            zero_cols.push(j);
        } else {
            scaled.column_mut(j).unscale_mut(nrm);
        }
    }
    if !zero_cols.is_empty() {
        return Err(zero_cols);
    }
    let gs = gram_schmidt(&scaled, RANK_TOL);
    // A and R share singular values
    if inverse_condition(&gs.r) >= RANK_TOL && gs.dependent.is_empty() {
        return Ok(());
    }
    if !gs.dependent.is_empty() {
        return Err(gs.dependent);
    }
    // ill-conditioned without an exactly dependent column: blame the
    // column with the smallest residual norm
    let worst = (0..k)
        .min_by(|&a, &b| gs.r[(a, a)].total_cmp(&gs.r[(b, b)]))
        .unwrap_or(0);
    Err(vec![worst])
}

/// Residual of `v` after projecting onto the orthonormal columns of `q`.
pub fn residualize(q: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    if q.ncols() == 0 {
        return v.clone();
    }
    v - q * (q.transpose() * v)
}

/// `B = [[1, beta], [0, 1]]`, the map taking the structural covariance to the
/// reduced-form one: `Omega = B Sigma B'`.
pub fn reduced_form_map(beta: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, beta, 0.0, 1.0)
}

pub fn omega_from_sigma(sigma: &Matrix2<f64>, beta: f64) -> Matrix2<f64> {
    let b = reduced_form_map(beta);
    b * sigma * b.transpose()
}

pub fn sigma_from_omega(omega: &Matrix2<f64>, beta: f64) -> Matrix2<f64> {
    let s11 = omega[(0, 0)] - 2.0 * beta * omega[(0, 1)] + beta * beta * omega[(1, 1)];
    let s12 = omega[(0, 1)] - beta * omega[(1, 1)];
    Matrix2::new(s11, s12, s12, omega[(1, 1)])
}

/// Closed-form inverse of a 2x2 matrix; `None` when singular.
pub fn inv2(m: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

/// True when a symmetric 2x2 matrix has strictly positive eigenvalues.
pub fn is_pd2(m: &Matrix2<f64>) -> bool {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    m[(0, 0)] > 0.0 && det > 0.0 && m.iter().all(|v| v.is_finite())
}
