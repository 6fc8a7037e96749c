//! Small complex linear-algebra helpers shared across modules.
//!
//! All matrices are dense [`nalgebra`] matrices over `Complex<f64>` (or
//! `f64` for real-valued covariances). Sizes here are modest (at most a few
//! hundred per dimension), so dense factorizations are the right tool.

use nalgebra::{Cholesky, DMatrix, DVector, Dim, Dyn, Matrix, Storage};
use num_complex::Complex64;

/// Dense complex matrix.
pub type CMat = DMatrix<Complex64>;
/// Dense complex column vector.
pub type CVec = DVector<Complex64>;
/// Dense real matrix.
pub type RMat = DMatrix<f64>;
/// Dense real column vector.
pub type RVec = DVector<f64>;

/// Complex unity shorthand.
pub const C_ONE: Complex64 = Complex64::new(1.0, 0.0);
/// Complex zero shorthand.
pub const C_ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// `n × n` complex identity.
pub fn ceye(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Real scalar promoted to complex.
pub fn cr(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// Symmetrize a numerically-Hermitian matrix: `(m + mᴴ) / 2`.
///
/// Used before eigendecompositions of matrices that are Hermitian by
/// construction but accumulate round-off asymmetry.
pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

/// Cholesky factorization of a Hermitian positive-definite matrix.
///
/// Returns `None` when the matrix is numerically indefinite or singular.
/// (nalgebra's complex Cholesky happily takes complex square roots of
/// negative pivots, so definiteness is checked here via the factor
/// diagonal.)
pub fn hpd_cholesky(m: &CMat) -> Option<Cholesky<Complex64, Dyn>> {
    let ch = Cholesky::new(m.clone())?;
    let l = ch.l();
    for j in 0..l.nrows() {
        let d = l[(j, j)];
        if !(d.re > 0.0 && d.im.abs() <= 1e-10 * d.re) {
            return None;
        }
    }
    Some(ch)
}

/// Solve `m · x = rhs` for Hermitian positive-definite `m`.
pub fn hpd_solve(m: &CMat, rhs: &CMat) -> Option<CMat> {
    hpd_cholesky(m).map(|ch| ch.solve(rhs))
}

/// Factor of a Hermitian positive-semidefinite matrix with eigenvalue
/// clipping.
///
/// Returns `(f, clipped)` where `f · fᴴ` reproduces the input with any
/// negative eigenvalues (round-off leakage) clipped to zero, and `clipped`
/// is the total magnitude of clipped negative eigenvalues. Eigenvalues below
/// `-tol · λ_max` count as clipped mass; tiny negatives within tolerance are
/// still zeroed but not reported.
pub fn psd_factor(m: &CMat, tol: f64) -> (CMat, f64) {
    let eig = hermitian_part(m).symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let threshold = -tol * lambda_max.max(f64::MIN_POSITIVE);
    let mut clipped = 0.0;
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < threshold {
            clipped += -lam;
        }
        let root = cr(lam.max(0.0).sqrt());
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= root;
        }
    }
    (scaled, clipped)
}

/// Real symmetric counterpart of [`psd_factor`].
pub fn psd_factor_real(m: &RMat, tol: f64) -> (RMat, f64) {
    let sym = (m + m.transpose()).scale(0.5);
    let eig = sym.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let threshold = -tol * lambda_max.max(f64::MIN_POSITIVE);
    let mut clipped = 0.0;
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < threshold {
            clipped += -lam;
        }
        let root = lam.max(0.0).sqrt();
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= root;
        }
    }
    (scaled, clipped)
}

/// Maximum absolute entry of a complex matrix or vector.
pub fn max_abs<R: Dim, C: Dim, S: Storage<Complex64, R, C>>(
    m: &Matrix<Complex64, R, C, S>,
) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hermitian_test_matrix() -> CMat {
        // 2x2 Hermitian PD with a complex off-diagonal entry.
        CMat::from_row_slice(
            2,
            2,
            &[
                Complex64::new(2.0, 0.0),
                Complex64::new(0.3, -0.4),
                Complex64::new(0.3, 0.4),
                Complex64::new(1.0, 0.0),
            ],
        )
    }

    #[test]
    fn hpd_solve_matches_direct_inverse() {
        let m = hermitian_test_matrix();
        let rhs = ceye(2);
        let x = hpd_solve(&m, &rhs).expect("PD matrix must factor");
        let residual = &m * &x - ceye(2);
        assert!(max_abs(&residual) < 1e-12);
    }

    #[test]
    fn hpd_cholesky_rejects_indefinite() {
        let mut m = hermitian_test_matrix();
        m[(1, 1)] = Complex64::new(-1.0, 0.0);
        assert!(hpd_cholesky(&m).is_none());
    }

    #[test]
    fn psd_factor_reconstructs_input() {
        let m = hermitian_test_matrix();
        let (f, clipped) = psd_factor(&m, 1e-12);
        let rebuilt = &f * f.adjoint();
        assert!(max_abs(&(&rebuilt - &m)) < 1e-12);
        assert_relative_eq!(clipped, 0.0);
    }

    #[test]
    fn psd_factor_clips_negative_leakage() {
        // Rank-1 PSD perturbed by a small negative eigenvalue.
        let v = CVec::from_vec(vec![cr(1.0), Complex64::new(0.0, 1.0)]);
        let m = &v * v.adjoint() - ceye(2).scale(1e-6);
        let (f, clipped) = psd_factor(&m, 1e-12);
        let rebuilt = &f * f.adjoint();
        // Reconstruction is the clipped (PSD) version of the input.
        let eig = rebuilt.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-14));
        assert!(clipped > 0.0);
    }

    #[test]
    fn psd_factor_real_handles_singular_covariance() {
        // Ones matrix: rank 1, eigenvalues {3, 0, 0}.
        let m = RMat::from_element(3, 3, 1.0);
        let (f, clipped) = psd_factor_real(&m, 1e-12);
        let rebuilt = &f * f.transpose();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(rebuilt[(i, j)], 1.0, epsilon = 1e-12);
            }
        }
        assert_relative_eq!(clipped, 0.0);
    }
}
