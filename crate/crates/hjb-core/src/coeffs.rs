//! Coefficient fields and evaluation of the semilinear operator
//!
//! ```text
//! F[v](x) = 1/2 Tr(A(x) D^2 v) + 1/2 (grad v)' Abar(x) (grad v) + B(x)'grad v + V(x)
//! ```
//!
//! on a vector domain, together with ellipticity checks for the pair
//! `(A, Abar)` and detection of the proportional case `Abar = kappa * A`
//! (which makes the Cauchy problem linearizable by the exponential
//! transform `w = exp(kappa v)`).

use crate::error::{HjbError, Result};
use crate::functions::C2Fn;
use crate::grid::{FieldDerivatives, Grid};
use crate::linalg;
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

type MatrixFn<T> = Arc<dyn Fn(&[T]) -> DMatrix<T> + Send + Sync>;
type VectorFn<T> = Arc<dyn Fn(&[T]) -> DVector<T> + Send + Sync>;
type ScalarFn<T> = Arc<dyn Fn(&[T]) -> T + Send + Sync>;

/// Coefficient data `(A, Abar, B, V)` of the operator on a `dim`-dimensional
/// vector domain. Maps are immutable and thread-safe; evaluation never
/// mutates the field.
#[derive(Clone)]
pub struct CoefficientField<T: Scalar> {
    dim: usize,
    a: MatrixFn<T>,
    abar: MatrixFn<T>,
    b: VectorFn<T>,
    v: ScalarFn<T>,
    /// Declared comparability bounds `(kappa_lo, kappa_hi)` with
    /// `kappa_lo * A <= Abar <= kappa_hi * A`, when known by construction.
    declared_kappa: Option<(T, T)>,
}

impl<T: Scalar> std::fmt::Debug for CoefficientField<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientField")
            .field("dim", &self.dim)
            .field("declared_kappa", &self.declared_kappa.map(|(l, h)| (l.as_f64(), h.as_f64())))
            .finish()
    }
}

impl<T: Scalar> CoefficientField<T> {
    /// Builds a field from raw coefficient maps.
    pub fn new(
        dim: usize,
        a: impl Fn(&[T]) -> DMatrix<T> + Send + Sync + 'static,
        abar: impl Fn(&[T]) -> DMatrix<T> + Send + Sync + 'static,
        b: impl Fn(&[T]) -> DVector<T> + Send + Sync + 'static,
        v: impl Fn(&[T]) -> T + Send + Sync + 'static,
    ) -> Self {
        CoefficientField {
            dim,
            a: Arc::new(a),
            abar: Arc::new(abar),
            b: Arc::new(b),
            v: Arc::new(v),
            declared_kappa: None,
        }
    }

    /// Linear-quadratic family: `A = a0 I`, `Abar = kappa a0 I`,
    /// `B(x) = -beta x`, `V(x) = -gamma |x|^2 + v0`.
    pub fn lq(dim: usize, a0: T, kappa: T, beta: T, gamma: T, v0: T) -> Result<Self> {
        if a0 <= T::zero() || kappa <= T::zero() {
            return Err(HjbError::invalid(format!(
                "lq family needs a0 > 0 and kappa > 0, got a0 = {}, kappa = {}",
                a0.as_f64(),
                kappa.as_f64()
            )));
        }
        let mut f = Self::new(
            dim,
            move |_x| DMatrix::identity(dim, dim) * a0,
            move |_x| DMatrix::identity(dim, dim) * (kappa * a0),
            move |x| DVector::from_iterator(dim, x.iter().map(|&xi| -beta * xi)),
            move |x| {
                let r2 = x.iter().fold(T::zero(), |s, &xi| s + xi * xi);
                -gamma * r2 + v0
            },
        );
        f.declared_kappa = Some((kappa, kappa));
        Ok(f)
    }

    /// Polynomial family: constant matrices `A` (SPD) and `Abar` (symmetric),
    /// polynomial drift components and potential.
    pub fn custom_poly(
        a: DMatrix<T>,
        abar: DMatrix<T>,
        b: Vec<crate::functions::Polynomial<T>>,
        v: crate::functions::Polynomial<T>,
    ) -> Result<Self> {
        let dim = a.nrows();
        if a.ncols() != dim || abar.nrows() != dim || abar.ncols() != dim {
            return Err(HjbError::DimensionMismatch {
                expected: dim,
                got: abar.nrows(),
                context: "custom_poly matrices".to_string(),
            });
        }
        if b.len() != dim {
            return Err(HjbError::DimensionMismatch {
                expected: dim,
                got: b.len(),
                context: "custom_poly drift components".to_string(),
            });
        }
        for (k, p) in b.iter().enumerate() {
            if p.dim() != dim {
                return Err(HjbError::DimensionMismatch {
                    expected: dim,
                    got: p.dim(),
                    context: format!("custom_poly drift component {k}"),
                });
            }
        }
        if v.dim() != dim {
            return Err(HjbError::DimensionMismatch {
                expected: dim,
                got: v.dim(),
                context: "custom_poly potential".to_string(),
            });
        }
        let ev = linalg::symmetric_eigenvalues(&a);
        if ev[0] <= T::zero() {
            return Err(HjbError::EllipticityViolation {
                point: vec![],
                details: format!(
                    "custom_poly A must be positive definite (min eigenvalue {})",
                    ev[0].as_f64()
                ),
            });
        }
        let a_sym = linalg::symmetrize(&a);
        let abar_sym = linalg::symmetrize(&abar);
        let kappa = {
            let pencil = linalg::pencil_eigenvalues(&abar_sym, &a_sym)?;
            (pencil[0], pencil[pencil.len() - 1])
        };
        let b = Arc::new(b);
        let mut f = Self::new(
            dim,
            move |_x| a_sym.clone(),
            move |_x| abar_sym.clone(),
            {
                let b = Arc::clone(&b);
                move |x| DVector::from_iterator(dim, b.iter().map(|p| p.value(x)))
            },
            move |x| v.value(x),
        );
        f.declared_kappa = Some(kappa);
        Ok(f)
    }

    /// Domain dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Diffusion matrix `A(x)`.
    pub fn a(&self, x: &[T]) -> DMatrix<T> {
        (self.a)(x)
    }

    /// Gradient-quadratic weight `Abar(x)`.
    pub fn abar(&self, x: &[T]) -> DMatrix<T> {
        (self.abar)(x)
    }

    /// Drift `B(x)`.
    pub fn b(&self, x: &[T]) -> DVector<T> {
        (self.b)(x)
    }

    /// Potential `V(x)`.
    pub fn v(&self, x: &[T]) -> T {
        (self.v)(x)
    }

    /// Declared `(kappa_lo, kappa_hi)` comparability bounds, if any.
    pub fn declared_kappa(&self) -> Option<(T, T)> {
        self.declared_kappa
    }

    /// Overrides the declared comparability bounds.
    pub fn set_declared_kappa(&mut self, bounds: Option<(T, T)>) {
        self.declared_kappa = bounds;
    }

    /// Evaluates the operator on an analytic input (exact derivatives).
    pub fn eval_operator(&self, v_fn: &dyn C2Fn<T>, x: &[T]) -> Result<T> {
        Ok(self.eval_operator_parts(v_fn, x)?.total())
    }

    /// Evaluates the operator, returning the four constituent terms.
    pub fn eval_operator_parts(&self, v_fn: &dyn C2Fn<T>, x: &[T]) -> Result<OperatorParts<T>> {
        if v_fn.dim() != self.dim || x.len() != self.dim {
            return Err(HjbError::DimensionMismatch {
                expected: self.dim,
                got: if v_fn.dim() != self.dim { v_fn.dim() } else { x.len() },
                context: "eval_operator".to_string(),
            });
        }
        let grad = v_fn.gradient(x);
        let hess = v_fn.hessian(x);
        Ok(self.combine(x, &grad, &hess))
    }

    /// Evaluates the operator on a grid field at node `idx` using finite
    /// differences (centered in the interior, inward one-sided near
    /// boundaries and masked neighbors).
    pub fn eval_operator_grid(
        &self,
        grid: &Grid<T>,
        values: &[T],
        idx: usize,
    ) -> Result<T> {
        if grid.dim() != self.dim {
            return Err(HjbError::DimensionMismatch {
                expected: self.dim,
                got: grid.dim(),
                context: "eval_operator_grid".to_string(),
            });
        }
        if values.len() != grid.node_count() {
            return Err(HjbError::DimensionMismatch {
                expected: grid.node_count(),
                got: values.len(),
                context: "eval_operator_grid values".to_string(),
            });
        }
        let der = FieldDerivatives::new(grid, values);
        let grad = der.gradient(idx);
        let hess = der.hessian(idx);
        let x = grid.position(idx);
        Ok(self.combine(&x, &grad, &hess).total())
    }

    fn combine(&self, x: &[T], grad: &DVector<T>, hess: &DMatrix<T>) -> OperatorParts<T> {
        let a = self.a(x);
        let abar = self.abar(x);
        let b = self.b(x);
        let half = T::lit(0.5);
        let mut diffusion = T::zero();
        for i in 0..self.dim {
            for j in 0..self.dim {
                diffusion += a[(i, j)] * hess[(i, j)];
            }
        }
        diffusion *= half;
        let quad = (grad.transpose() * &abar * grad)[(0, 0)] * half;
        let drift = b.dot(grad);
        OperatorParts {
            diffusion,
            quadratic: quad,
            drift,
            potential: self.v(x),
        }
    }

    /// Evaluates the linear exponential-transform operator
    /// `L^kappa[w] = 1/2 Tr(A D^2 w) + B' grad w + kappa V w`
    /// on an analytic input.
    pub fn eval_cole_hopf_linear(&self, w_fn: &dyn C2Fn<T>, x: &[T], kappa: T) -> Result<T> {
        if w_fn.dim() != self.dim || x.len() != self.dim {
            return Err(HjbError::DimensionMismatch {
                expected: self.dim,
                got: if w_fn.dim() != self.dim { w_fn.dim() } else { x.len() },
                context: "eval_cole_hopf_linear".to_string(),
            });
        }
        let grad = w_fn.gradient(x);
        let hess = w_fn.hessian(x);
        let a = self.a(x);
        let b = self.b(x);
        let half = T::lit(0.5);
        let mut diffusion = T::zero();
        for i in 0..self.dim {
            for j in 0..self.dim {
                diffusion += a[(i, j)] * hess[(i, j)];
            }
        }
        Ok(half * diffusion + b.dot(&grad) + kappa * self.v(x) * w_fn.value(x))
    }
}

/// The four constituent terms of one operator evaluation.
#[derive(Clone, Copy, Debug)]
pub struct OperatorParts<T> {
    /// `1/2 Tr(A D^2 v)`.
    pub diffusion: T,
    /// `1/2 (grad v)' Abar (grad v)`.
    pub quadratic: T,
    /// `B' grad v`.
    pub drift: T,
    /// `V(x)`.
    pub potential: T,
}

impl<T: Scalar> OperatorParts<T> {
    /// Sum of all four terms.
    pub fn total(&self) -> T {
        self.diffusion + self.quadratic + self.drift + self.potential
    }

    /// Sum with the potential excluded (used by the exponential-transform
    /// consistency identity).
    pub fn total_without_potential(&self) -> T {
        self.diffusion + self.quadratic + self.drift
    }
}

/// Result of an ellipticity / comparability sweep over sample points.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EllipticityReport {
    /// Smallest eigenvalue of `A` seen over the samples.
    pub c_n_est: f64,
    /// Smallest generalized eigenvalue of the pencil `(Abar, A)` (estimate of
    /// `kappa_lo`).
    pub kappa_lo: f64,
    /// Largest generalized eigenvalue of the pencil (estimate of `kappa_hi`).
    pub kappa_hi: f64,
    /// Whether `A` stayed PD and `Abar` stayed comparable (`kappa_lo > 0`).
    pub pass: bool,
    /// Sample point attaining the smallest `A` eigenvalue.
    pub worst_point: Vec<f64>,
    /// Number of samples inspected.
    pub samples: usize,
}

/// Sweeps `A(x)` positive-definiteness and the comparability bounds
/// `kappa_lo A <= Abar <= kappa_hi A` over explicit sample points.
///
/// Errors with the offending point if `A` fails to be positive definite.
pub fn check_ellipticity<T: Scalar>(
    field: &CoefficientField<T>,
    samples: &[Vec<T>],
) -> Result<EllipticityReport> {
    if samples.is_empty() {
        return Err(HjbError::ProbeCoverage {
            details: "ellipticity check requires at least one sample point".to_string(),
        });
    }
    let mut c_n = T::max_value().unwrap_or_else(T::one);
    let mut k_lo = T::max_value().unwrap_or_else(T::one);
    let mut k_hi = -T::max_value().unwrap_or_else(T::one);
    let mut worst: Vec<f64> = vec![];
    for x in samples {
        if x.len() != field.dim() {
            return Err(HjbError::DimensionMismatch {
                expected: field.dim(),
                got: x.len(),
                context: "ellipticity sample".to_string(),
            });
        }
        let a = field.a(x);
        let ev_a = linalg::symmetric_eigenvalues(&a);
        if ev_a[0] <= T::zero() {
            return Err(HjbError::EllipticityViolation {
                point: x.iter().map(|v| v.as_f64()).collect(),
                details: format!("A has non-positive eigenvalue {}", ev_a[0].as_f64()),
            });
        }
        if ev_a[0] < c_n {
            c_n = ev_a[0];
            worst = x.iter().map(|v| v.as_f64()).collect();
        }
        let abar = field.abar(x);
        let pencil = linalg::pencil_eigenvalues(&abar, &a).map_err(|_| {
            HjbError::EllipticityViolation {
                point: x.iter().map(|v| v.as_f64()).collect(),
                details: "pencil reduction failed (A numerically singular)".to_string(),
            }
        })?;
        if pencil[0] < k_lo {
            k_lo = pencil[0];
        }
        if pencil[pencil.len() - 1] > k_hi {
            k_hi = pencil[pencil.len() - 1];
        }
    }
    Ok(EllipticityReport {
        c_n_est: c_n.as_f64(),
        kappa_lo: k_lo.as_f64(),
        kappa_hi: k_hi.as_f64(),
        pass: c_n > T::zero() && k_lo > T::zero(),
        worst_point: worst,
        samples: samples.len(),
    })
}

/// Detects the proportional case `Abar = kappa A`: returns `Some(kappa)` when
/// `|Abar(x) - kappa A(x)|_F <= tol * |A(x)|_F` holds at every sample, with
/// `kappa` taken as the mean generalized eigenvalue at the first sample.
pub fn cole_hopf_kappa<T: Scalar>(
    field: &CoefficientField<T>,
    samples: &[Vec<T>],
    tol: T,
) -> Result<Option<T>> {
    if samples.is_empty() {
        return Err(HjbError::ProbeCoverage {
            details: "cole_hopf_kappa requires at least one sample point".to_string(),
        });
    }
    let first = &samples[0];
    let pencil = linalg::pencil_eigenvalues(&field.abar(first), &field.a(first))?;
    let kappa = pencil.iter().fold(T::zero(), |s, &l| s + l) / T::from_count(pencil.len());
    if kappa <= T::zero() {
        return Ok(None);
    }
    for x in samples {
        let a = field.a(x);
        let abar = field.abar(x);
        let diff = &abar - &a * kappa;
        if diff.norm() > tol * a.norm() {
            return Ok(None);
        }
    }
    Ok(Some(kappa))
}
