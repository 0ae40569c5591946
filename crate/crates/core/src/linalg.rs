//! Small dense linear-algebra helpers shared by the filtering and synthesis code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue cutoff below which a symmetric square root treats a direction as null.
pub const ROOT_CLIP: f64 = 1e-12;
/// Condition number above which inner matrices are regularized before inversion.
pub const MAX_CONDITION: f64 = 1e12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry, or 0 for empty matrices.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = 1.0 + max_abs(m);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// Eigen-decomposition of the symmetrized input.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m).eigenvalues.min()
}

/// Symmetric PSD square root; eigenvalues below `ROOT_CLIP · λmax` are set to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = sym_eigen(m);
    let lmax = eig.eigenvalues.max().max(0.0);
    let cut = ROOT_CLIP * lmax;
    let roots = eig
        .eigenvalues
        .map(|l| if l > cut && l > 0.0 { l.sqrt() } else { 0.0 });
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    symmetrize(&(&scaled * eig.eigenvectors.transpose()))
}

/// Thin factor `L` (n × r) with `L Lᵀ ≈ m`, keeping eigen-directions above `ROOT_CLIP · λmax`.
///
/// Always returns at least one column so callers can build fixed-shape blocks.
pub fn thin_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = sym_eigen(m);
    let lmax = eig.eigenvalues.max().max(0.0);
    let cut = ROOT_CLIP * lmax;
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > cut && eig.eigenvalues[i] > 0.0).collect();
    if keep.is_empty() {
        return DMatrix::zeros(n, 1);
    }
    let mut out = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        out.set_column(c, &(eig.eigenvectors.column(i) * s));
    }
    out
}

/// Weighted Gram matrix `D diag(w) Dᵀ`, projected onto the PSD cone when weights are negative.
///
/// With non-negative weights the Gram form is PSD up to rounding and is returned directly.
/// Otherwise the (typically low) rank structure of `D` is used to clip negative eigenvalues
/// without decomposing the full `n × n` product.
pub fn psd_weighted_gram(d: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let n = d.nrows();
    let k = d.ncols();
    if w.iter().all(|&x| x >= 0.0) {
        let mut b = d.clone();
        for (j, &wj) in w.iter().enumerate() {
            b.column_mut(j).scale_mut(wj.sqrt());
        }
        return symmetrize(&(&b * b.transpose()));
    }
    if k >= n {
        let full = d * DMatrix::from_diagonal(w) * d.transpose();
        return clip_psd(&full);
    }
    let qr = d.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let core = &r * DMatrix::from_diagonal(w) * r.transpose();
    let eig = sym_eigen(&core);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let b = q * &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    symmetrize(&(&b * b.transpose()))
}

/// Projects a symmetric matrix onto the PSD cone by zeroing negative eigenvalues.
pub fn clip_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = sym_eigen(m);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return symmetrize(m);
    }
    let vals = eig.eigenvalues.map(|l| l.max(0.0));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

/// Outcome of preparing an SPD matrix for inversion.
pub struct Regularized {
    pub matrix: DMatrix<f64>,
    pub condition: f64,
    pub shift: f64,
}

/// Adds `1e-12 · trace/n · I` when the condition number exceeds [`MAX_CONDITION`]
/// (or the matrix is not positive definite).
pub fn regularize_spd(m: &DMatrix<f64>) -> Regularized {
    let n = m.nrows();
    let sym = symmetrize(m);
    if n == 0 {
        return Regularized { matrix: sym, condition: 1.0, shift: 0.0 };
    }
    let eig = SymmetricEigen::new(sym.clone());
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if condition <= MAX_CONDITION {
        return Regularized { matrix: sym, condition, shift: 0.0 };
    }
    let shift = 1e-12 * sym.trace().abs() / n as f64;
    let mut matrix = sym;
    for i in 0..n {
        matrix[(i, i)] += shift;
    }
    Regularized { matrix, condition, shift }
}

/// Solves `m X = rhs` for symmetric positive definite `m` (after regularization).
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let reg = regularize_spd(m);
    let chol = reg.matrix.cholesky()?;
    Some(chol.solve(rhs))
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    spd_solve(m, &DMatrix::identity(n, n)).map(|x| symmetrize(&x))
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let (r, c) = m.shape();
    (0..r).all(|i| (0..c).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Extracts rows and columns `idx` of a square matrix.
pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}
