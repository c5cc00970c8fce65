//! Small dense and banded linear-algebra helpers shared across modules.

use crate::error::{HjbError, Result};
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    let sym = symmetrize(m);
    let mut ev: Vec<T> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues must be comparable"));
    ev
}

/// Defensive symmetrization `(m + m')/2`.
pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Eigenvalues below `-tol * max(|lambda|)` raise an error; small negative
/// round-off eigenvalues are clipped to zero.
pub fn spd_sqrt<T: Scalar>(m: &DMatrix<T>, tol: T) -> Result<DMatrix<T>> {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(T::zero(), |a, &l| if l.abs() > a { l.abs() } else { a });
    let floor = -tol * max_abs;
    let mut roots = eig.eigenvalues.clone();
    for l in roots.iter_mut() {
        if *l < floor {
            return Err(HjbError::EllipticityViolation {
                point: vec![],
                details: format!(
                    "matrix square root requested for non-PSD matrix (eigenvalue {} < {})",
                    l.as_f64(),
                    floor.as_f64()
                ),
            });
        }
        *l = if *l > T::zero() { l.sqrt() } else { T::zero() };
    }
    let q = eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        let r = roots[j];
        for v in col.iter_mut() {
            *v *= r;
        }
    }
    Ok(&scaled * q.transpose())
}

/// Eigenvalue clip of a symmetric matrix at a floor; returns the clipped
/// matrix and the count of eigenvalues that were below the floor.
pub fn clip_spectrum<T: Scalar>(m: &DMatrix<T>, floor: T) -> (DMatrix<T>, usize) {
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    let mut clipped = 0usize;
    let mut vals = eig.eigenvalues.clone();
    for l in vals.iter_mut() {
        if *l < floor {
            *l = floor;
            clipped += 1;
        }
    }
    if clipped == 0 {
        return (sym, 0);
    }
    let q = eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        let r = vals[j];
        for v in col.iter_mut() {
            *v *= r;
        }
    }
    (&scaled * q.transpose(), clipped)
}

/// Generalized eigenvalues of the symmetric-definite pencil `(abar, a)` with
/// `a` symmetric positive definite: the eigenvalues of `L^{-1} abar L^{-T}`
/// where `a = L L'`. Ascending order. Errors if `a` is not positive definite.
pub fn pencil_eigenvalues<T: Scalar>(abar: &DMatrix<T>, a: &DMatrix<T>) -> Result<Vec<T>> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| HjbError::EllipticityViolation {
            point: vec![],
            details: "diffusion matrix A is not positive definite (Cholesky failed)".to_string(),
        })?;
    let l = chol.l();
    let y = l
        .solve_lower_triangular(&symmetrize(abar))
        .ok_or_else(|| HjbError::EllipticityViolation {
            point: vec![],
            details: "triangular solve failed in pencil reduction".to_string(),
        })?;
    let m = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| HjbError::EllipticityViolation {
            point: vec![],
            details: "triangular solve failed in pencil reduction".to_string(),
        })?;
    Ok(symmetric_eigenvalues(&m))
}

/// Banded square matrix in LAPACK-like row band storage (no pivoting).
///
/// Entry `(i, j)` with `|i - j| <= bandwidth` lives at `data[i][j - i + kl]`.
/// Intended for the strictly diagonally dominant systems `I - tau * L`
/// produced by implicit time stepping and resolvent iterations, for which
/// Gaussian elimination without pivoting is stable.
pub struct BandedMatrix<T> {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<T>,
    factored: bool,
}

/// Default cap on `rows * stored_band_width` for banded factorization
/// (guards against accidental multi-gigabyte allocations on 3D grids).
pub const BANDED_ENTRY_CAP: usize = 1 << 25;

impl<T: Scalar> BandedMatrix<T> {
    /// Zero-initialized banded matrix with `n` rows, lower bandwidth `kl`,
    /// and upper bandwidth `ku`.
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Result<Self> {
        let width = kl + ku + 1;
        if n.saturating_mul(width) > BANDED_ENTRY_CAP {
            return Err(HjbError::BandedTooLarge {
                rows: n,
                bandwidth: width,
                cap: BANDED_ENTRY_CAP,
            });
        }
        Ok(BandedMatrix {
            n,
            kl,
            ku,
            data: vec![T::zero(); n * width],
            factored: false,
        })
    }

    /// Number of rows.
    pub fn nrows(&self) -> usize {
        self.n
    }

    fn width(&self) -> usize {
        self.kl + self.ku + 1
    }

    /// Read entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> T {
        let lo = i.saturating_sub(self.kl);
        if j < lo || j > i + self.ku || j >= self.n {
            return T::zero();
        }
        self.data[i * self.width() + (j + self.kl - i)]
    }

    /// Accumulate into entry `(i, j)`; panics if outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        assert!(!self.factored, "cannot modify a factored banded matrix");
        let lo = i.saturating_sub(self.kl);
        assert!(
            j >= lo && j <= i + self.ku && j < self.n,
            "band entry ({i},{j}) outside bandwidth ({}, {})",
            self.kl,
            self.ku
        );
        let w = self.width();
        self.data[i * w + (j + self.kl - i)] += v;
    }

    /// In-place LU factorization without pivoting. Errors on a zero (or
    /// effectively zero) pivot.
    pub fn factor(&mut self) -> Result<()> {
        let (n, kl, ku, w) = (self.n, self.kl, self.ku, self.width());
        for k in 0..n {
            let pivot = self.data[k * w + kl];
            if pivot == T::zero() {
                return Err(HjbError::NonConvergence {
                    what: "banded LU".to_string(),
                    details: format!("zero pivot at row {k}"),
                });
            }
            let i_max = (k + kl).min(n - 1);
            for i in (k + 1)..=i_max {
                // a[i][k]
                let idx_ik = i * w + (k + kl - i);
                let factor = self.data[idx_ik] / pivot;
                self.data[idx_ik] = factor;
                let j_max = (k + ku).min(n - 1);
                for j in (k + 1)..=j_max {
                    let a_kj = self.data[k * w + (j + kl - k)];
                    if a_kj != T::zero() {
                        let idx_ij = i * w + (j + kl - i);
                        self.data[idx_ij] -= factor * a_kj;
                    }
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Solves `self * x = b` using the stored LU factors.
    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        assert!(self.factored, "factor() must be called before solve()");
        let (n, kl, ku, w) = (self.n, self.kl, self.ku, self.width());
        let mut x = b.clone();
        // forward: L y = b (unit lower triangular)
        for i in 0..n {
            let j_lo = i.saturating_sub(kl);
            let mut s = x[i];
            for j in j_lo..i {
                s -= self.data[i * w + (j + kl - i)] * x[j];
            }
            x[i] = s;
        }
        // backward: U x = y
        for i in (0..n).rev() {
            let j_hi = (i + ku).min(n - 1);
            let mut s = x[i];
            for j in (i + 1)..=j_hi {
                s -= self.data[i * w + (j + kl - i)] * x[j];
            }
            x[i] = s / self.data[i * w + kl];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spd_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = spd_sqrt(&m, 1e-12).unwrap();
        let back = &r * &r;
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(back[(i, j)], m[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn spd_sqrt_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(spd_sqrt(&m, 1e-12).is_err());
    }

    #[test]
    fn pencil_eigenvalues_identity_pencil() {
        // abar = 2 a  =>  both generalized eigenvalues are exactly 2.
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let abar = &a * 2.0;
        let ev = pencil_eigenvalues(&abar, &a).unwrap();
        assert_relative_eq!(ev[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(ev[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn pencil_rejects_singular_a() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let abar = DMatrix::identity(2, 2);
        assert!(pencil_eigenvalues(&abar, &a).is_err());
    }

    #[test]
    fn banded_solves_tridiagonal_system() {
        // -u'' discretization: tridiag(-1, 2, -1), solve against a known vector.
        let n = 50;
        let mut m = BandedMatrix::<f64>::zeros(n, 1, 1).unwrap();
        for i in 0..n {
            m.add(i, i, 2.0);
            if i > 0 {
                m.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                m.add(i, i + 1, -1.0);
            }
        }
        let x_true = DVector::from_fn(n, |i, _| (i as f64 * 0.37).sin());
        // compute b = M x via band entries
        let mut b = DVector::zeros(n);
        for i in 0..n {
            let mut s = 2.0 * x_true[i];
            if i > 0 {
                s -= x_true[i - 1];
            }
            if i + 1 < n {
                s -= x_true[i + 1];
            }
            b[i] = s;
        }
        m.factor().unwrap();
        let x = m.solve(&b);
        for i in 0..n {
            assert_relative_eq!(x[i], x_true[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn banded_matches_dense_lu_on_wider_band() {
        let n = 24;
        let (kl, ku) = (3, 2);
        let mut band = BandedMatrix::<f64>::zeros(n, kl, ku).unwrap();
        let mut dense = DMatrix::<f64>::zeros(n, n);
        // diagonally dominant random-ish band
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                let v = if i == j {
                    10.0 + (i as f64).cos()
                } else {
                    ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6
                };
                band.add(i, j, v);
                dense[(i, j)] = v;
            }
        }
        let b = DVector::from_fn(n, |i, _| (i as f64 * 0.11).cos());
        band.factor().unwrap();
        let x_band = band.solve(&b);
        let x_dense = dense.lu().solve(&b).unwrap();
        for i in 0..n {
            assert_relative_eq!(x_band[i], x_dense[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn banded_cap_is_enforced() {
        let res = BandedMatrix::<f64>::zeros(1 << 20, 1 << 10, 1 << 10);
        assert!(matches!(res, Err(HjbError::BandedTooLarge { .. })));
    }

    #[test]
    fn clip_spectrum_counts_and_floors() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let (c, k) = clip_spectrum(&m, 0.0);
        assert_eq!(k, 1);
        let ev = symmetric_eigenvalues(&c);
        assert!(ev[0] >= -1e-15);
    }
}
