//! Twice-differentiable scalar functions with exact derivatives.
//!
//! Operator evaluation accepts either a grid field (finite differences) or an
//! analytic input implementing [`C2Fn`], for which values, gradients, and
//! Hessians are exact. Concrete implementations cover the inputs the library
//! and its verification suites need: quadratics (Lyapunov candidates and
//! closed-form solutions) and multivariate polynomials (identification tests).

use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};

/// A twice continuously differentiable function `R^d -> R` with exact
/// derivatives.
pub trait C2Fn<T: Scalar>: Send + Sync {
    /// Input dimension `d`.
    fn dim(&self) -> usize;
    /// Function value at `x`.
    fn value(&self, x: &[T]) -> T;
    /// Gradient at `x` (length `d`).
    fn gradient(&self, x: &[T]) -> DVector<T>;
    /// Hessian at `x` (`d x d`, symmetric).
    fn hessian(&self, x: &[T]) -> DMatrix<T>;
}

/// Quadratic function `x -> 0.5 x' M x + b' x + c` with symmetric `M`.
#[derive(Clone, Debug)]
pub struct Quadratic<T: Scalar> {
    /// Symmetric quadratic coefficient matrix.
    pub m: DMatrix<T>,
    /// Linear coefficient vector.
    pub b: DVector<T>,
    /// Constant offset.
    pub c: T,
}

impl<T: Scalar> Quadratic<T> {
    /// Builds a quadratic, symmetrizing `m` defensively.
    pub fn new(m: DMatrix<T>, b: DVector<T>, c: T) -> Self {
        let half = T::lit(0.5);
        let sym = (&m + m.transpose()) * half;
        Quadratic { m: sym, b, c }
    }

    /// The isotropic quadratic `x -> 0.5 w |x|^2` in dimension `d`.
    pub fn isotropic(d: usize, w: T) -> Self {
        Quadratic {
            m: DMatrix::identity(d, d) * w,
            b: DVector::zeros(d),
            c: T::zero(),
        }
    }
}

impl<T: Scalar> C2Fn<T> for Quadratic<T> {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, x: &[T]) -> T {
        let xv = DVector::from_row_slice(x);
        let half = T::lit(0.5);
        (xv.transpose() * &self.m * &xv)[(0, 0)] * half + self.b.dot(&xv) + self.c
    }

    fn gradient(&self, x: &[T]) -> DVector<T> {
        let xv = DVector::from_row_slice(x);
        &self.m * xv + &self.b
    }

    fn hessian(&self, _x: &[T]) -> DMatrix<T> {
        self.m.clone()
    }
}

/// One polynomial term: `coefficient * prod_i x_i^{exponents[i]}`.
#[derive(Clone, Debug)]
pub struct Monomial<T> {
    /// Multiplicative coefficient.
    pub coefficient: T,
    /// Per-variable exponents (length = dimension).
    pub exponents: Vec<u32>,
}

/// Multivariate polynomial with exact derivatives, stored as a sum of
/// monomials.
#[derive(Clone, Debug)]
pub struct Polynomial<T: Scalar> {
    dim: usize,
    terms: Vec<Monomial<T>>,
}

impl<T: Scalar> Polynomial<T> {
    /// Builds a polynomial in `dim` variables from monomial terms. Every
    /// term's exponent list must have length `dim`.
    pub fn new(dim: usize, terms: Vec<Monomial<T>>) -> crate::error::Result<Self> {
        for (k, term) in terms.iter().enumerate() {
            if term.exponents.len() != dim {
                return Err(crate::error::HjbError::DimensionMismatch {
                    expected: dim,
                    got: term.exponents.len(),
                    context: format!("polynomial term {k}"),
                });
            }
        }
        Ok(Polynomial { dim, terms })
    }

    /// Read access to the monomial terms.
    pub fn terms(&self) -> &[Monomial<T>] {
        &self.terms
    }

    fn term_value(term: &Monomial<T>, x: &[T]) -> T {
        let mut v = term.coefficient;
        for (xi, &e) in x.iter().zip(&term.exponents) {
            v *= xi.powi(e as i32);
        }
        v
    }

    /// Value of `d/dx_i` of a single term.
    fn term_partial(term: &Monomial<T>, x: &[T], i: usize) -> T {
        let ei = term.exponents[i];
        if ei == 0 {
            return T::zero();
        }
        let mut v = term.coefficient * T::from_count(ei as usize);
        for (j, (xj, &e)) in x.iter().zip(&term.exponents).enumerate() {
            let p = if j == i { e - 1 } else { e };
            v *= xj.powi(p as i32);
        }
        v
    }

    fn term_second(term: &Monomial<T>, x: &[T], i: usize, j: usize) -> T {
        let (ei, ej) = (term.exponents[i], term.exponents[j]);
        if i == j {
            if ei < 2 {
                return T::zero();
            }
            let mut v = term.coefficient * T::from_count((ei * (ei - 1)) as usize);
            for (k, (xk, &e)) in x.iter().zip(&term.exponents).enumerate() {
                let p = if k == i { e - 2 } else { e };
                v *= xk.powi(p as i32);
            }
            v
        } else {
            if ei == 0 || ej == 0 {
                return T::zero();
            }
            let mut v = term.coefficient * T::from_count((ei * ej) as usize);
            for (k, (xk, &e)) in x.iter().zip(&term.exponents).enumerate() {
                let p = if k == i || k == j { e - 1 } else { e };
                v *= xk.powi(p as i32);
            }
            v
        }
    }
}

impl<T: Scalar> C2Fn<T> for Polynomial<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[T]) -> T {
        self.terms
            .iter()
            .fold(T::zero(), |acc, t| acc + Self::term_value(t, x))
    }

    fn gradient(&self, x: &[T]) -> DVector<T> {
        DVector::from_fn(self.dim, |i, _| {
            self.terms
                .iter()
                .fold(T::zero(), |acc, t| acc + Self::term_partial(t, x, i))
        })
    }

    fn hessian(&self, x: &[T]) -> DMatrix<T> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            self.terms
                .iter()
                .fold(T::zero(), |acc, t| acc + Self::term_second(t, x, i, j))
        })
    }
}

type BoxedValueFn<T> = Box<dyn Fn(&[T]) -> T + Send + Sync>;
type BoxedGradientFn<T> = Box<dyn Fn(&[T]) -> DVector<T> + Send + Sync>;
type BoxedHessianFn<T> = Box<dyn Fn(&[T]) -> DMatrix<T> + Send + Sync>;

/// A C² function given by explicit closures (value, gradient, Hessian).
pub struct ClosureC2<T: Scalar> {
    dim: usize,
    value: BoxedValueFn<T>,
    gradient: BoxedGradientFn<T>,
    hessian: BoxedHessianFn<T>,
}

impl<T: Scalar> ClosureC2<T> {
    /// Wraps user closures as a [`C2Fn`]. The caller is responsible for the
    /// derivatives actually being exact.
    pub fn new(
        dim: usize,
        value: impl Fn(&[T]) -> T + Send + Sync + 'static,
        gradient: impl Fn(&[T]) -> DVector<T> + Send + Sync + 'static,
        hessian: impl Fn(&[T]) -> DMatrix<T> + Send + Sync + 'static,
    ) -> Self {
        ClosureC2 {
            dim,
            value: Box::new(value),
            gradient: Box::new(gradient),
            hessian: Box::new(hessian),
        }
    }
}

impl<T: Scalar> C2Fn<T> for ClosureC2<T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[T]) -> T {
        (self.value)(x)
    }
    fn gradient(&self, x: &[T]) -> DVector<T> {
        (self.gradient)(x)
    }
    fn hessian(&self, x: &[T]) -> DMatrix<T> {
        (self.hessian)(x)
    }
}

/// Smooth cutoff machinery: `sigma(u) = exp(-1/u)` for `u > 0` (else 0), the
/// smooth step `S(u) = sigma(u) / (sigma(u) + sigma(1-u))`, and the radial
/// cutoff `eta(r) = S(r - r0)` which vanishes for `r <= r0` and equals one for
/// `r >= r0 + 1`. First and second derivatives are exact.
pub mod cutoff {
    use crate::scalar::Scalar;

    /// `sigma(u) = exp(-1/u)` for `u > 0`, zero otherwise. Returns
    /// `(sigma, sigma', sigma'')`.
    fn sigma<T: Scalar>(u: T) -> (T, T, T) {
        if u <= T::zero() {
            return (T::zero(), T::zero(), T::zero());
        }
        let inv = T::one() / u;
        let s = (-inv).exp();
        let s1 = s * inv * inv;
        // sigma'' = sigma * (1 - 2u) / u^4
        let two = T::lit(2.0);
        let s2 = s * (T::one() - two * u) * inv * inv * inv * inv;
        (s, s1, s2)
    }

    /// Smooth step `S(u)`: 0 for `u <= 0`, 1 for `u >= 1`, strictly increasing
    /// in between. Returns `(S, S', S'')`.
    pub fn smooth_step<T: Scalar>(u: T) -> (T, T, T) {
        if u <= T::zero() {
            return (T::zero(), T::zero(), T::zero());
        }
        if u >= T::one() {
            return (T::one(), T::zero(), T::zero());
        }
        let (a, a1, a2) = sigma(u);
        let (b, b1, b2) = sigma(T::one() - u);
        // d/du sigma(1-u) = -sigma'(1-u); second derivative flips back.
        let (b1, b2) = (-b1, b2);
        let denom = a + b;
        let s = a / denom;
        let d1 = (a1 * b - a * b1) / (denom * denom);
        // quotient rule second derivative of a/(a+b)
        let num2 = a2 * b - a * b2;
        let two = T::lit(2.0);
        let d2 = num2 / (denom * denom) - two * (a1 * b - a * b1) * (a1 + b1) / (denom * denom * denom);
        (s, d1, d2)
    }

    /// Radial cutoff `eta(r) = S(r - r0)` with derivatives in `r`.
    pub fn eta<T: Scalar>(r: T, r0: T) -> (T, T, T) {
        smooth_step(r - r0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd_gradient<F: C2Fn<f64>>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f.value(&xp) - f.value(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn quadratic_value_gradient_hessian() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_row_slice(&[0.5, -1.0]);
        let q = Quadratic::new(m.clone(), b, 2.0);
        let x = [1.0, -2.0];
        // 0.5*(2*1 - 2*1*2*... ) compute directly
        let xv = DVector::from_row_slice(&x);
        let expect = 0.5 * (xv.transpose() * &m * &xv)[(0, 0)] + 0.5 * 1.0 + (-1.0) * (-2.0) + 2.0;
        assert_relative_eq!(q.value(&x), expect, epsilon = 1e-14);
        let g = q.gradient(&x);
        let gfd = fd_gradient(&q, &x, 1e-6);
        assert_relative_eq!(g[0], gfd[0], epsilon = 1e-6);
        assert_relative_eq!(g[1], gfd[1], epsilon = 1e-6);
        assert_eq!(q.hessian(&x), q.m);
    }

    #[test]
    fn polynomial_derivatives_match_finite_differences() {
        // p(x,y) = 3 x^2 y - y^3 + 2x + 7
        let p = Polynomial::new(
            2,
            vec![
                Monomial { coefficient: 3.0, exponents: vec![2, 1] },
                Monomial { coefficient: -1.0, exponents: vec![0, 3] },
                Monomial { coefficient: 2.0, exponents: vec![1, 0] },
                Monomial { coefficient: 7.0, exponents: vec![0, 0] },
            ],
        )
        .unwrap();
        let x = [1.3, -0.7];
        assert_relative_eq!(
            p.value(&x),
            3.0 * 1.3f64.powi(2) * (-0.7) - (-0.7f64).powi(3) + 2.0 * 1.3 + 7.0,
            epsilon = 1e-13
        );
        let g = p.gradient(&x);
        let gfd = fd_gradient(&p, &x, 1e-6);
        for i in 0..2 {
            assert_relative_eq!(g[i], gfd[i], epsilon = 1e-5);
        }
        let h = p.hessian(&x);
        // d2/dx2 = 6y ; d2/dxdy = 6x ; d2/dy2 = -6y
        assert_relative_eq!(h[(0, 0)], 6.0 * (-0.7), epsilon = 1e-13);
        assert_relative_eq!(h[(0, 1)], 6.0 * 1.3, epsilon = 1e-13);
        assert_relative_eq!(h[(1, 0)], 6.0 * 1.3, epsilon = 1e-13);
        assert_relative_eq!(h[(1, 1)], -6.0 * (-0.7), epsilon = 1e-13);
    }

    #[test]
    fn polynomial_rejects_bad_exponent_length() {
        let bad = Polynomial::new(
            2,
            vec![Monomial { coefficient: 1.0, exponents: vec![1] }],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn smooth_step_endpoints_and_monotonicity() {
        let (s0, d0, _) = cutoff::smooth_step(0.0f64);
        let (s1, d1, _) = cutoff::smooth_step(1.0f64);
        assert_eq!((s0, d0), (0.0, 0.0));
        assert_eq!((s1, d1), (0.0 + 1.0, 0.0));
        // non-decreasing everywhere; strictly increasing away from the
        // saturated tails (where 1 - S underflows double precision)
        let mut prev = 0.0;
        for k in 1..100 {
            let u = k as f64 / 100.0;
            let (s, d, _) = cutoff::smooth_step(u);
            assert!(s >= prev, "smooth step must not decrease");
            if (0.15..=0.85).contains(&u) {
                assert!(s > prev, "smooth step must increase at u = {u}");
                assert!(d > 0.0);
            }
            assert!((0.0..=1.0).contains(&s));
            prev = s;
        }
    }

    #[test]
    fn smooth_step_derivatives_match_finite_differences() {
        for &u in &[0.2f64, 0.5, 0.8] {
            let h = 1e-6;
            let (_, d1, d2) = cutoff::smooth_step(u);
            let (sp, dp, _) = cutoff::smooth_step(u + h);
            let (sm, dm, _) = cutoff::smooth_step(u - h);
            assert_relative_eq!(d1, (sp - sm) / (2.0 * h), epsilon = 1e-6);
            assert_relative_eq!(d2, (dp - dm) / (2.0 * h), epsilon = 1e-5);
        }
    }

    #[test]
    fn eta_is_zero_then_one() {
        let (e_lo, _, _) = cutoff::eta(1.0f64, 2.0);
        let (e_hi, _, _) = cutoff::eta(3.5f64, 2.0);
        assert_eq!(e_lo, 0.0);
        assert_eq!(e_hi, 1.0);
    }
}
