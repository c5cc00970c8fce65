//! The matrix domain: operators on the cone of symmetric positive definite
//! `d x d` matrices.
//!
//! Matrix diffusions here have noise coefficients `a^{ij}` determined by a
//! pair of SPD matrix fields `f = F F'` and `g = G' G` through
//!
//! ```text
//! Tr(a^{ij} (a^{kl})') = f_ik g_jl + f_il g_jk + f_jk g_il + f_jl g_ik,
//! ```
//!
//! and the operator reads (full-matrix derivative convention: `D_(ij)` treats
//! all `d^2` entries as independent, evaluated at symmetric points)
//!
//! ```text
//! F[v](x) = 1/2 sum Tr(a^{ij}(a^{kl})') D2_(ij),(kl) v
//!         + sum B_ij D_(ij) v
//!         + 1/2 sum D_(ij) v  Abar_(ij),(kl)  D_(kl) v
//!         + V(x).
//! ```
//!
//! The module also provides the coordinate identification with a vector
//! domain of dimension `m = d(d+1)/2` (distinct entries, diagonal first) and
//! the Lyapunov building blocks `log det x` and `|x|` (Frobenius norm) with
//! exact derivatives.

use crate::coeffs::CoefficientField;
use crate::error::{HjbError, Result};
use crate::functions::{cutoff, C2Fn, Polynomial};
use crate::linalg;
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Default scale-relative cone tolerance: a matrix counts as inside the open
/// cone when `lambda_min > CONE_REL_TOL * lambda_max`.
pub const CONE_REL_TOL: f64 = 1e-12;

/// A validated point of the open SPD cone.
#[derive(Clone, Debug)]
pub struct SpdPoint<T: Scalar> {
    m: DMatrix<T>,
    inv: DMatrix<T>,
    log_det: T,
}

impl<T: Scalar> SpdPoint<T> {
    /// Validates symmetry and scale-relative positive definiteness
    /// (`lambda_min > rel_tol * lambda_max`), then caches the inverse and
    /// log-determinant.
    pub fn new(m: DMatrix<T>, rel_tol: T) -> Result<Self> {
        let d = m.nrows();
        if m.ncols() != d || d == 0 {
            return Err(HjbError::DimensionMismatch {
                expected: d,
                got: m.ncols(),
                context: "SpdPoint must be square and non-empty".to_string(),
            });
        }
        let asym = (&m - m.transpose()).norm();
        if asym > rel_tol.max(T::lit(1e-9)) * m.norm().max(T::one()) {
            return Err(HjbError::ConeViolation {
                details: format!("matrix is not symmetric (asymmetry norm {})", asym.as_f64()),
            });
        }
        let sym = linalg::symmetrize(&m);
        let ev = linalg::symmetric_eigenvalues(&sym);
        let (lo, hi) = (ev[0], ev[ev.len() - 1]);
        let nan = lo.as_f64().is_nan() || hi.as_f64().is_nan();
        if nan || hi <= T::zero() || lo <= rel_tol * hi {
            return Err(HjbError::ConeViolation {
                details: format!(
                    "eigenvalue range [{}, {}] fails lambda_min > {} * lambda_max",
                    lo.as_f64(),
                    hi.as_f64(),
                    rel_tol.as_f64()
                ),
            });
        }
        let chol = sym.clone().cholesky().ok_or_else(|| HjbError::ConeViolation {
            details: "Cholesky factorization failed".to_string(),
        })?;
        let mut log_det = T::zero();
        for i in 0..d {
            log_det += chol.l()[(i, i)].ln();
        }
        log_det += log_det;
        let inv = chol.inverse();
        Ok(SpdPoint { m: sym, inv, log_det })
    }

    /// Validates with the default cone tolerance.
    pub fn try_from_matrix(m: DMatrix<T>) -> Result<Self> {
        Self::new(m, T::lit(CONE_REL_TOL))
    }

    /// Matrix dimension `d`.
    pub fn d(&self) -> usize {
        self.m.nrows()
    }

    /// The matrix itself.
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.m
    }

    /// Cached inverse.
    pub fn inverse(&self) -> &DMatrix<T> {
        &self.inv
    }

    /// Cached `log det x`.
    pub fn log_det(&self) -> T {
        self.log_det
    }

    /// Frobenius norm `|x|`.
    pub fn norm(&self) -> T {
        self.m.norm()
    }
}

/// Index bijections between matrix entry pairs and flat coordinates.
///
/// `I` enumerates the `m = d(d+1)/2` distinct entries of a symmetric matrix,
/// diagonal first (`I(p) = (p, p)` for `p < d`), then the upper triangle in
/// row-major order. `J` enumerates all `d^2` entries by column stacking
/// (`J(q) = (q mod d, q div d)`).
#[derive(Clone, Copy, Debug)]
pub struct IndexBijection {
    d: usize,
}

impl IndexBijection {
    /// Bijection for `d x d` symmetric matrices.
    pub fn new(d: usize) -> Self {
        IndexBijection { d }
    }

    /// Matrix dimension.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of distinct symmetric entries `m = d(d+1)/2`.
    pub fn m(&self) -> usize {
        self.d * (self.d + 1) / 2
    }

    /// `I(p)`: the entry pair of flat symmetric coordinate `p`.
    pub fn i_pair(&self, p: usize) -> (usize, usize) {
        let d = self.d;
        if p < d {
            return (p, p);
        }
        let mut rem = p - d;
        for i in 0..d {
            let row_len = d - 1 - i;
            if rem < row_len {
                return (i, i + 1 + rem);
            }
            rem -= row_len;
        }
        panic!("symmetric coordinate {p} out of range for d = {d}");
    }

    /// Inverse of `I` on unordered pairs.
    pub fn p_of_pair(&self, i: usize, j: usize) -> usize {
        let d = self.d;
        assert!(i < d && j < d);
        if i == j {
            return i;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        // offset of (a,b) in the row-major upper triangle
        let before: usize = (0..a).map(|r| d - 1 - r).sum();
        d + before + (b - a - 1)
    }

    /// `J(q)`: the entry pair of column-stacked coordinate `q`.
    pub fn j_pair(&self, q: usize) -> (usize, usize) {
        (q % self.d, q / self.d)
    }

    /// Inverse of `J`: column-stacked coordinate of `(i, j)`.
    pub fn q_of_pair(&self, i: usize, j: usize) -> usize {
        j * self.d + i
    }
}

/// Flattens the distinct entries of a symmetric matrix: `y_p = x_{I(p)}`.
pub fn ell<T: Scalar>(x: &DMatrix<T>) -> DVector<T> {
    let idx = IndexBijection::new(x.nrows());
    DVector::from_fn(idx.m(), |p, _| {
        let (i, j) = idx.i_pair(p);
        x[(i, j)]
    })
}

/// Rebuilds the symmetric matrix with distinct entries `y` (no cone check).
pub fn ell_inv_symmetric<T: Scalar>(y: &[T], d: usize) -> Result<DMatrix<T>> {
    let idx = IndexBijection::new(d);
    if y.len() != idx.m() {
        return Err(HjbError::DimensionMismatch {
            expected: idx.m(),
            got: y.len(),
            context: "ell_inv coordinate length".to_string(),
        });
    }
    let mut m = DMatrix::zeros(d, d);
    for (p, &yp) in y.iter().enumerate() {
        let (i, j) = idx.i_pair(p);
        m[(i, j)] = yp;
        m[(j, i)] = yp;
    }
    Ok(m)
}

/// Rebuilds and validates cone membership.
pub fn ell_inv<T: Scalar>(y: &[T], d: usize) -> Result<SpdPoint<T>> {
    SpdPoint::try_from_matrix(ell_inv_symmetric(y, d)?)
}

/// The noise trace form `Tr(a^{ij} (a^{kl})')` built from `f` and `g`.
#[inline]
pub fn noise_trace_form<T: Scalar>(
    f: &DMatrix<T>,
    g: &DMatrix<T>,
    ij: (usize, usize),
    kl: (usize, usize),
) -> T {
    let (i, j) = ij;
    let (k, l) = kl;
    f[(i, k)] * g[(j, l)] + f[(i, l)] * g[(j, k)] + f[(j, k)] * g[(i, l)] + f[(j, l)] * g[(i, k)]
}

/// The quadratic form `theta -> 4 Tr(f theta g theta)` of the second-order
/// coefficients applied to a symmetric direction `theta`.
pub fn quad_form<T: Scalar>(f: &DMatrix<T>, g: &DMatrix<T>, theta: &DMatrix<T>) -> T {
    let prod = f * theta * g * theta;
    T::lit(4.0) * prod.trace()
}

/// Doubles the diagonal of a symmetric matrix (the `^D` operation of the
/// quadratic-form vectorization identity).
pub fn double_diag<T: Scalar>(theta: &DMatrix<T>) -> DMatrix<T> {
    let mut out = theta.clone();
    for i in 0..theta.nrows() {
        out[(i, i)] += theta[(i, i)];
    }
    out
}

/// Entry map of a general Abar: `(x, (i,j), (k,l)) -> Abar_(ij),(kl)`.
pub type AbarEntryFn<T> = dyn Fn(&DMatrix<T>, (usize, usize), (usize, usize)) -> T + Send + Sync;

/// Abar specification on the matrix domain.
#[derive(Clone)]
pub enum AbarSpec<T: Scalar> {
    /// No gradient-quadratic term.
    Zero,
    /// `Abar_(ij),(kl) = kappa * Tr(a^{ij}(a^{kl})')` (proportional case).
    ProportionalToNoise {
        /// Proportionality constant `kappa > 0`.
        kappa: T,
    },
    /// General entry map; must satisfy the symmetries
    /// `Abar_(ij),(kl) = Abar_(ji),(kl) = Abar_(ij),(lk) = Abar_(kl),(ij)`.
    General(Arc<AbarEntryFn<T>>),
}

impl<T: Scalar> AbarSpec<T> {
    /// Entry `Abar_(ij),(kl)` at `x` given the noise fields evaluated there.
    pub fn entry(
        &self,
        x: &DMatrix<T>,
        f: &DMatrix<T>,
        g: &DMatrix<T>,
        ij: (usize, usize),
        kl: (usize, usize),
    ) -> T {
        match self {
            AbarSpec::Zero => T::zero(),
            AbarSpec::ProportionalToNoise { kappa } => *kappa * noise_trace_form(f, g, ij, kl),
            AbarSpec::General(map) => map(x, ij, kl),
        }
    }
}

type MatrixMapFn<T> = Arc<dyn Fn(&DMatrix<T>) -> DMatrix<T> + Send + Sync>;
type MatrixScalarFn<T> = Arc<dyn Fn(&DMatrix<T>) -> T + Send + Sync>;

/// Coefficient data of the operator on the SPD cone: noise fields `f`, `g`,
/// drift `B` (symmetric-matrix-valued), potential `V`, and `Abar`.
#[derive(Clone)]
pub struct MatrixCoefficients<T: Scalar> {
    d: usize,
    f: MatrixMapFn<T>,
    g: MatrixMapFn<T>,
    b: MatrixMapFn<T>,
    v: MatrixScalarFn<T>,
    abar: AbarSpec<T>,
}

impl<T: Scalar> MatrixCoefficients<T> {
    /// Builds matrix coefficients from raw maps (all evaluated on symmetric
    /// matrices; cone membership is the caller's concern).
    pub fn new(
        d: usize,
        f: impl Fn(&DMatrix<T>) -> DMatrix<T> + Send + Sync + 'static,
        g: impl Fn(&DMatrix<T>) -> DMatrix<T> + Send + Sync + 'static,
        b: impl Fn(&DMatrix<T>) -> DMatrix<T> + Send + Sync + 'static,
        v: impl Fn(&DMatrix<T>) -> T + Send + Sync + 'static,
        abar: AbarSpec<T>,
    ) -> Self {
        MatrixCoefficients {
            d,
            f: Arc::new(f),
            g: Arc::new(g),
            b: Arc::new(b),
            v: Arc::new(v),
            abar,
        }
    }

    /// Matrix dimension `d`.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Noise field `f(x)`.
    pub fn f(&self, x: &DMatrix<T>) -> DMatrix<T> {
        (self.f)(x)
    }

    /// Noise field `g(x)`.
    pub fn g(&self, x: &DMatrix<T>) -> DMatrix<T> {
        (self.g)(x)
    }

    /// Drift `B(x)`.
    pub fn b(&self, x: &DMatrix<T>) -> DMatrix<T> {
        (self.b)(x)
    }

    /// Potential `V(x)`.
    pub fn v(&self, x: &DMatrix<T>) -> T {
        (self.v)(x)
    }

    /// The Abar specification.
    pub fn abar(&self) -> &AbarSpec<T> {
        &self.abar
    }

    /// Replaces the potential.
    pub fn with_potential(
        mut self,
        v: impl Fn(&DMatrix<T>) -> T + Send + Sync + 'static,
    ) -> Self {
        self.v = Arc::new(v);
        self
    }

    /// Sets `Abar = kappa * (noise trace form)`.
    pub fn with_proportional_abar(mut self, kappa: T) -> Self {
        self.abar = AbarSpec::ProportionalToNoise { kappa };
        self
    }
}

/// Parameters of the Wishart family
/// `dX = (L L' + K X + X K') dt + sqrt(X) dW Lambda' + Lambda dW' sqrt(X)`.
#[derive(Clone, Debug)]
pub struct WishartParams<T: Scalar> {
    /// Constant-drift factor `L` (the drift constant term is `L L'`).
    pub l: DMatrix<T>,
    /// Noise factor `Lambda` (so `g = Lambda Lambda'`).
    pub lambda: DMatrix<T>,
    /// Linear-drift matrix `K`.
    pub k: DMatrix<T>,
}

impl<T: Scalar> WishartParams<T> {
    /// Validates square shapes of matching dimension.
    pub fn new(l: DMatrix<T>, lambda: DMatrix<T>, k: DMatrix<T>) -> Result<Self> {
        let d = l.nrows();
        for (name, m) in [("L", &l), ("Lambda", &lambda), ("K", &k)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(HjbError::DimensionMismatch {
                    expected: d,
                    got: m.nrows().max(m.ncols()),
                    context: format!("Wishart parameter {name}"),
                });
            }
        }
        Ok(WishartParams { l, lambda, k })
    }

    /// Matrix dimension.
    pub fn d(&self) -> usize {
        self.l.nrows()
    }
}

/// Coefficients of the Wishart family: `f(x) = x`, `g = Lambda Lambda'`,
/// `B(x) = L L' + K x + x K'`. Potential and Abar are left to the caller
/// (defaults: `V = 0`, `Abar = 0`).
pub fn wishart_coefficients<T: Scalar>(p: &WishartParams<T>) -> MatrixCoefficients<T> {
    let d = p.d();
    let gg = &p.lambda * p.lambda.transpose();
    let ll = &p.l * p.l.transpose();
    let k = p.k.clone();
    MatrixCoefficients::new(
        d,
        |x| x.clone(),
        move |_x| gg.clone(),
        move |x| &ll + &k * x + x * k.transpose(),
        |_x| T::zero(),
        AbarSpec::Zero,
    )
}

/// Wishart cone-boundary gate: strict positive definiteness of
/// `L L' - (d+1) Lambda Lambda'`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct WishartGateReport {
    /// Smallest eigenvalue of `L L' - (d+1) Lambda Lambda'`.
    pub margin: f64,
    /// Strict positivity of the margin.
    pub pass: bool,
}

/// Checks the Wishart gate `L L' > (d+1) Lambda Lambda'` (strict).
pub fn check_wishart_gate<T: Scalar>(p: &WishartParams<T>) -> WishartGateReport {
    let d = p.d();
    let gap = &p.l * p.l.transpose()
        - (&p.lambda * p.lambda.transpose()) * T::from_count(d + 1);
    let ev = linalg::symmetric_eigenvalues(&gap);
    WishartGateReport {
        margin: ev[0].as_f64(),
        pass: ev[0] > T::zero(),
    }
}

/// The boundary functional
/// `H_delta(x) = Tr(B x^{-1}) - (1+delta) Tr(f x^{-1} g x^{-1}) - Tr(f x^{-1}) Tr(g x^{-1})`.
pub fn h_delta<T: Scalar>(mc: &MatrixCoefficients<T>, delta: T, x: &SpdPoint<T>) -> T {
    let xm = x.matrix();
    let xi = x.inverse();
    let f = mc.f(xm);
    let g = mc.g(xm);
    let b = mc.b(xm);
    let t1 = (&b * xi).trace();
    let fxi = &f * xi;
    let gxi = &g * xi;
    let t2 = (&fxi * &gxi).trace();
    let t3 = fxi.trace() * gxi.trace();
    t1 - (T::one() + delta) * t2 - t3
}

/// A twice-differentiable function of a matrix argument with exact
/// derivatives in the full-matrix convention (`D_(ij)` treats all `d^2`
/// entries as independent; values are taken at symmetric points).
pub trait SpdC2Fn<T: Scalar>: Send + Sync {
    /// Matrix dimension `d`.
    fn d(&self) -> usize;
    /// Function value.
    fn value(&self, x: &DMatrix<T>) -> T;
    /// Gradient matrix `[D_(ij) v]`.
    fn grad(&self, x: &DMatrix<T>) -> DMatrix<T>;
    /// Hessian `[D2_(ij),(kl) v]` as a `d^2 x d^2` matrix with column-stacked
    /// pair indices (`(i,j) -> j*d + i`).
    fn hessian(&self, x: &DMatrix<T>) -> DMatrix<T>;
}

/// `log det x` with exact derivatives: gradient `x^{-1}`, Hessian
/// `-(x^{-1})_il (x^{-1})_jk`.
pub struct LogDetFn {
    d: usize,
}

impl LogDetFn {
    /// For `d x d` matrices.
    pub fn new(d: usize) -> Self {
        LogDetFn { d }
    }
}

impl<T: Scalar> SpdC2Fn<T> for LogDetFn {
    fn d(&self) -> usize {
        self.d
    }

    fn value(&self, x: &DMatrix<T>) -> T {
        x.determinant().ln()
    }

    fn grad(&self, x: &DMatrix<T>) -> DMatrix<T> {
        log_det_gradient(x).expect("log det gradient needs an invertible argument")
    }

    fn hessian(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let d = self.d;
        let xi = x
            .clone()
            .try_inverse()
            .expect("log det Hessian needs an invertible argument");
        let idx = IndexBijection::new(d);
        DMatrix::from_fn(d * d, d * d, |q1, q2| {
            let (i, j) = idx.j_pair(q1);
            let (k, l) = idx.j_pair(q2);
            -xi[(i, l)] * xi[(j, k)]
        })
    }
}

/// Gradient of `log det` at `x`: the (symmetric) inverse `x^{-1}`.
pub fn log_det_gradient<T: Scalar>(x: &DMatrix<T>) -> Result<DMatrix<T>> {
    x.clone().try_inverse().ok_or_else(|| HjbError::ConeViolation {
        details: "log_det_gradient: matrix not invertible".to_string(),
    })
}

/// Hessian of `log det` contracted against two symmetric directions:
/// `sum D2_(ij),(kl) theta_ij psi_kl = -Tr(theta x^{-1} psi x^{-1})`.
pub fn log_det_hessian_action<T: Scalar>(
    x: &SpdPoint<T>,
    theta: &DMatrix<T>,
    psi: &DMatrix<T>,
) -> T {
    let xi = x.inverse();
    -(theta * xi * psi * xi).trace()
}

/// Frobenius norm `|x|` with exact derivatives.
pub struct FrobeniusNormFn {
    d: usize,
}

impl FrobeniusNormFn {
    /// For `d x d` matrices.
    pub fn new(d: usize) -> Self {
        FrobeniusNormFn { d }
    }
}

impl<T: Scalar> SpdC2Fn<T> for FrobeniusNormFn {
    fn d(&self) -> usize {
        self.d
    }

    fn value(&self, x: &DMatrix<T>) -> T {
        x.norm()
    }

    fn grad(&self, x: &DMatrix<T>) -> DMatrix<T> {
        x / x.norm()
    }

    fn hessian(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let d = self.d;
        let r = x.norm();
        let r3 = r * r * r;
        let idx = IndexBijection::new(d);
        DMatrix::from_fn(d * d, d * d, |q1, q2| {
            let (i, j) = idx.j_pair(q1);
            let (k, l) = idx.j_pair(q2);
            let delta = if i == k && j == l { T::one() } else { T::zero() };
            delta / r - x[(i, j)] * x[(k, l)] / r3
        })
    }
}

/// Lyapunov candidate on the cone:
/// `v(x) = w_logdet * log det x + w_norm * |x| eta(|x|) + offset`,
/// where `eta(r)` is the smooth cutoff vanishing for `r <= n0 + 1` and equal
/// to one for `r >= n0 + 2`.
#[derive(Clone, Debug)]
pub struct MatrixLyapunovFn<T: Scalar> {
    /// Matrix dimension.
    pub d: usize,
    /// Weight on `log det x` (negative for the upper candidate phi0).
    pub w_logdet: T,
    /// Weight on `|x| eta(|x|)`.
    pub w_norm: T,
    /// Cutoff shift `n0`.
    pub n0: T,
    /// Additive constant.
    pub offset: T,
}

impl<T: Scalar> MatrixLyapunovFn<T> {
    /// `rho(r) = r * eta(r)` and two derivatives, with
    /// `eta(r) = S(r - n0 - 1)`.
    fn rho(&self, r: T) -> (T, T, T) {
        let (e, e1, e2) = cutoff::eta(r, self.n0 + T::one());
        (r * e, e + r * e1, e1 + e1 + r * e2)
    }
}

impl<T: Scalar> SpdC2Fn<T> for MatrixLyapunovFn<T> {
    fn d(&self) -> usize {
        self.d
    }

    fn value(&self, x: &DMatrix<T>) -> T {
        let (rho, _, _) = self.rho(x.norm());
        self.w_logdet * x.determinant().ln() + self.w_norm * rho + self.offset
    }

    fn grad(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let r = x.norm();
        let (_, rho1, _) = self.rho(r);
        let xi = x
            .clone()
            .try_inverse()
            .expect("Lyapunov gradient needs an invertible argument");
        xi * self.w_logdet + x * (self.w_norm * rho1 / r)
    }

    fn hessian(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let d = self.d;
        let r = x.norm();
        let (_, rho1, rho2) = self.rho(r);
        let xi = x
            .clone()
            .try_inverse()
            .expect("Lyapunov Hessian needs an invertible argument");
        let idx = IndexBijection::new(d);
        let r3 = r * r * r;
        DMatrix::from_fn(d * d, d * d, |q1, q2| {
            let (i, j) = idx.j_pair(q1);
            let (k, l) = idx.j_pair(q2);
            let delta = if i == k && j == l { T::one() } else { T::zero() };
            let ld = -xi[(i, l)] * xi[(j, k)];
            let norm_part = rho2 * x[(i, j)] * x[(k, l)] / (r * r)
                + rho1 * (delta / r - x[(i, j)] * x[(k, l)] / r3);
            self.w_logdet * ld + self.w_norm * norm_part
        })
    }
}

/// A polynomial in the `m = d(d+1)/2` distinct symmetric coordinates, viewed
/// as a matrix function through `ell` (chain-rule weights obtained from the
/// symmetric extension: off-diagonal full-matrix derivatives carry 1/2).
pub struct PolyViaEll<T: Scalar> {
    d: usize,
    poly: Polynomial<T>,
}

impl<T: Scalar> PolyViaEll<T> {
    /// Wraps a polynomial in the flattened coordinates of `d x d` symmetric
    /// matrices.
    pub fn new(d: usize, poly: Polynomial<T>) -> Result<Self> {
        let m = IndexBijection::new(d).m();
        if poly.dim() != m {
            return Err(HjbError::DimensionMismatch {
                expected: m,
                got: poly.dim(),
                context: "PolyViaEll coordinate polynomial".to_string(),
            });
        }
        Ok(PolyViaEll { d, poly })
    }

    /// The underlying coordinate polynomial.
    pub fn poly(&self) -> &Polynomial<T> {
        &self.poly
    }
}

impl<T: Scalar> SpdC2Fn<T> for PolyViaEll<T> {
    fn d(&self) -> usize {
        self.d
    }

    fn value(&self, x: &DMatrix<T>) -> T {
        let y = ell(x);
        self.poly.value(y.as_slice())
    }

    fn grad(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let idx = IndexBijection::new(self.d);
        let y = ell(x);
        let gy = self.poly.gradient(y.as_slice());
        let half = T::lit(0.5);
        DMatrix::from_fn(self.d, self.d, |i, j| {
            let p = idx.p_of_pair(i, j);
            if i == j {
                gy[p]
            } else {
                half * gy[p]
            }
        })
    }

    fn hessian(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let d = self.d;
        let idx = IndexBijection::new(d);
        let y = ell(x);
        let hy = self.poly.hessian(y.as_slice());
        let half = T::lit(0.5);
        DMatrix::from_fn(d * d, d * d, |q1, q2| {
            let (i, j) = idx.j_pair(q1);
            let (k, l) = idx.j_pair(q2);
            let w1 = if i == j { T::one() } else { half };
            let w2 = if k == l { T::one() } else { half };
            w1 * w2 * hy[(idx.p_of_pair(i, j), idx.p_of_pair(k, l))]
        })
    }
}

/// The constituent terms of a matrix-operator evaluation.
#[derive(Clone, Copy, Debug)]
pub struct MatrixOperatorParts<T> {
    /// `1/2 sum Tr(a^{ij}(a^{kl})') D2 v`.
    pub diffusion: T,
    /// `1/2 sum Dv Abar Dv`.
    pub quadratic: T,
    /// `sum B_ij D_(ij) v`.
    pub drift: T,
    /// `V(x)`.
    pub potential: T,
}

impl<T: Scalar> MatrixOperatorParts<T> {
    /// Sum of all four terms.
    pub fn total(&self) -> T {
        self.diffusion + self.quadratic + self.drift + self.potential
    }
}

/// Evaluates the matrix-domain operator on an analytic input.
pub fn matrix_operator_eval<T: Scalar>(
    mc: &MatrixCoefficients<T>,
    v_fn: &dyn SpdC2Fn<T>,
    x: &SpdPoint<T>,
) -> Result<MatrixOperatorParts<T>> {
    let d = mc.d();
    if v_fn.d() != d || x.d() != d {
        return Err(HjbError::DimensionMismatch {
            expected: d,
            got: if v_fn.d() != d { v_fn.d() } else { x.d() },
            context: "matrix_operator_eval".to_string(),
        });
    }
    let xm = x.matrix();
    let f = mc.f(xm);
    let g = mc.g(xm);
    let b = mc.b(xm);
    let grad = v_fn.grad(xm);
    let hess = v_fn.hessian(xm);
    let idx = IndexBijection::new(d);
    let half = T::lit(0.5);

    let mut diffusion = T::zero();
    for q1 in 0..d * d {
        let ij = idx.j_pair(q1);
        for q2 in 0..d * d {
            let kl = idx.j_pair(q2);
            diffusion += noise_trace_form(&f, &g, ij, kl) * hess[(q1, q2)];
        }
    }
    diffusion *= half;

    let mut quadratic = T::zero();
    match mc.abar() {
        AbarSpec::Zero => {}
        abar => {
            for q1 in 0..d * d {
                let ij = idx.j_pair(q1);
                for q2 in 0..d * d {
                    let kl = idx.j_pair(q2);
                    quadratic +=
                        grad[ij] * abar.entry(xm, &f, &g, ij, kl) * grad[kl];
                }
            }
            quadratic *= half;
        }
    }

    let drift = (b.transpose() * &grad).trace();

    Ok(MatrixOperatorParts {
        diffusion,
        quadratic,
        drift,
        potential: mc.v(xm),
    })
}

/// Builds the vector-coordinate image of matrix coefficients on the
/// `m = d(d+1)/2`-dimensional domain of distinct symmetric entries:
///
/// * `A_vec(y)_pq  = Tr(a^{I(p)} (a^{I(q)})')`
/// * `Abar_vec(y)_pq = Abar_{I(p), I(q)}`
/// * `B_vec(y)_p  = B_{I(p)}`
/// * `V_vec(y)    = V`
///
/// evaluated at `x = ell^{-1}(y)`. By construction
/// `F_matrix[v](x) = F_vector[v o ell^{-1}](ell(x))`.
pub fn vectorize<T: Scalar>(mc: &MatrixCoefficients<T>) -> CoefficientField<T> {
    let d = mc.d();
    let idx = IndexBijection::new(d);
    let m = idx.m();
    let mc_a = mc.clone();
    let mc_abar = mc.clone();
    let mc_b = mc.clone();
    let mc_v = mc.clone();
    CoefficientField::new(
        m,
        move |y| {
            let x = ell_inv_symmetric(y, d).expect("vectorize: coordinate length");
            let f = mc_a.f(&x);
            let g = mc_a.g(&x);
            DMatrix::from_fn(m, m, |p, q| {
                noise_trace_form(&f, &g, idx.i_pair(p), idx.i_pair(q))
            })
        },
        move |y| {
            let x = ell_inv_symmetric(y, d).expect("vectorize: coordinate length");
            let f = mc_abar.f(&x);
            let g = mc_abar.g(&x);
            DMatrix::from_fn(m, m, |p, q| {
                mc_abar
                    .abar()
                    .entry(&x, &f, &g, idx.i_pair(p), idx.i_pair(q))
            })
        },
        move |y| {
            let x = ell_inv_symmetric(y, d).expect("vectorize: coordinate length");
            let b = mc_b.b(&x);
            DVector::from_fn(m, |p, _| {
                let (i, j) = idx.i_pair(p);
                b[(i, j)]
            })
        },
        move |y| {
            let x = ell_inv_symmetric(y, d).expect("vectorize: coordinate length");
            mc_v.v(&x)
        },
    )
}

/// One point check of the Lyapunov upper bound
/// `F[phi0](x) <= -c_lo H_{4 kappa_hi c_lo}(x)
///   - (gamma1 + beta1 c_hi - 4 kappa_hi alpha1 c_hi^2) |x| 1_{|x| > n0+2} + C`.
#[derive(Clone, Copy, Debug)]
pub struct BoundCheck<T> {
    /// Left-hand side `F[phi0](x)`.
    pub lhs: T,
    /// Right-hand side of the bound.
    pub rhs: T,
    /// Whether `lhs <= rhs`.
    pub holds: bool,
}

/// Parameters of the cone Lyapunov candidates.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct MatrixLyapunovParams<T> {
    /// Log-det weight `c_lo > 0` of `phi0 = -c_lo log det x + c_hi |x| eta + C`.
    pub c_lo: T,
    /// Norm weight `c_hi > 0`.
    pub c_hi: T,
    /// Cutoff shift `n0`.
    pub n0: T,
    /// Additive constant `C`.
    pub offset: T,
}

impl<T: Scalar> MatrixLyapunovParams<T> {
    /// The candidate `phi0` as an analytic matrix function.
    pub fn phi0(&self, d: usize) -> MatrixLyapunovFn<T> {
        MatrixLyapunovFn {
            d,
            w_logdet: -self.c_lo,
            w_norm: self.c_hi,
            n0: self.n0,
            offset: self.offset,
        }
    }
}

/// Evaluates `phi0(x) = -c_lo log det x + c_hi |x| eta(|x|) + C`.
pub fn phi0_matrix<T: Scalar>(params: &MatrixLyapunovParams<T>, x: &SpdPoint<T>) -> T {
    let r = x.norm();
    let (e, _, _) = cutoff::eta(r, params.n0 + T::one());
    -params.c_lo * x.log_det() + params.c_hi * r * e + params.offset
}

/// Evaluates `psi0(x) = k_lo log det x - k_hi |x| eta(|x|)`.
pub fn psi0_matrix<T: Scalar>(k_lo: T, k_hi: T, n0: T, x: &SpdPoint<T>) -> T {
    let r = x.norm();
    let (e, _, _) = cutoff::eta(r, n0 + T::one());
    k_lo * x.log_det() - k_hi * r * e
}

/// Checks the upper bound for `F[phi0]` at one cone point, given the growth
/// constants `(alpha1, beta1, gamma1)`, the comparability bound `kappa_hi`,
/// and the bound constant `C`.
#[allow(clippy::too_many_arguments)]
pub fn fphi0_upper_bound<T: Scalar>(
    mc: &MatrixCoefficients<T>,
    lyap: &MatrixLyapunovParams<T>,
    kappa_hi: T,
    alpha1: T,
    beta1: T,
    gamma1: T,
    bound_c: T,
    x: &SpdPoint<T>,
) -> Result<BoundCheck<T>> {
    let phi0 = lyap.phi0(mc.d());
    let lhs = matrix_operator_eval(mc, &phi0, x)?.total();
    let four = T::lit(4.0);
    let delta = four * kappa_hi * lyap.c_lo;
    let hd = h_delta(mc, delta, x);
    let r = x.norm();
    let indicator = if r > lyap.n0 + T::lit(2.0) { T::one() } else { T::zero() };
    let coeff = gamma1 + beta1 * lyap.c_hi - four * kappa_hi * alpha1 * lyap.c_hi * lyap.c_hi;
    let rhs = -lyap.c_lo * hd - coeff * r * indicator + bound_c;
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_symmetric(d: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        (&m + m.transpose()) * 0.5
    }

    fn random_spd(d: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(d, d) * 0.3
    }

    #[test]
    fn bijection_matches_flattening_convention() {
        // d = 2: x = [[a, b], [b, c]] flattens to (a, c, b)
        let idx = IndexBijection::new(2);
        assert_eq!(idx.m(), 3);
        assert_eq!(idx.i_pair(0), (0, 0));
        assert_eq!(idx.i_pair(1), (1, 1));
        assert_eq!(idx.i_pair(2), (0, 1));
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 2.0]);
        let y = ell(&x);
        assert_eq!(y.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn bijection_roundtrips_d3() {
        let idx = IndexBijection::new(3);
        assert_eq!(idx.m(), 6);
        for p in 0..6 {
            let (i, j) = idx.i_pair(p);
            assert_eq!(idx.p_of_pair(i, j), p);
            assert_eq!(idx.p_of_pair(j, i), p);
        }
        // column stacking: J(0)=(0,0), J(1)=(1,0), ..., J(3)=(0,1)
        assert_eq!(idx.j_pair(0), (0, 0));
        assert_eq!(idx.j_pair(1), (1, 0));
        assert_eq!(idx.j_pair(3), (0, 1));
        for q in 0..9 {
            let (i, j) = idx.j_pair(q);
            assert_eq!(idx.q_of_pair(i, j), q);
        }
    }

    #[test]
    fn ell_inv_roundtrip_and_cone_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for d in [2usize, 3] {
            let x = random_spd(d, &mut rng);
            let y = ell(&x);
            let back = ell_inv(y.as_slice(), d).unwrap();
            assert_relative_eq!((back.matrix() - &x).norm(), 0.0, epsilon = 1e-14);
        }
        // strongly indefinite coordinates must be rejected
        let bad = ell_inv(&[1.0, -1.0, 0.0], 2);
        assert!(bad.is_err());
    }

    #[test]
    fn cone_tolerance_is_scale_relative() {
        // eigenvalues {1e-6, 1}: inside the cone even though 1e-6 is tiny
        let ok = SpdPoint::try_from_matrix(DMatrix::from_row_slice(
            2,
            2,
            &[1e-6, 0.0, 0.0, 1.0],
        ));
        assert!(ok.is_ok());
        // eigenvalues {1e-14, 1}: below the 1e-12 relative floor
        let bad = SpdPoint::try_from_matrix(DMatrix::from_row_slice(
            2,
            2,
            &[1e-14, 0.0, 0.0, 1.0],
        ));
        assert!(bad.is_err());
    }

    #[test]
    fn spd_point_caches_consistent_inverse_and_logdet() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = random_spd(3, &mut rng);
        let p = SpdPoint::try_from_matrix(x.clone()).unwrap();
        assert_relative_eq!((p.inverse() * &x - DMatrix::identity(3, 3)).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.log_det(), x.determinant().ln(), epsilon = 1e-12);
    }

    #[test]
    fn quad_form_identity_unit_matrices() {
        let f = DMatrix::<f64>::identity(2, 2);
        let g = DMatrix::<f64>::identity(2, 2);
        let theta = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(quad_form(&f, &g, &theta), 8.0, epsilon = 1e-14);
    }

    #[test]
    fn quad_form_matches_kronecker_form() {
        // Tr(f theta g theta) = vec(theta)' (g (x) f) vec(theta)
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..10 {
            let f = random_spd(3, &mut rng);
            let g = random_spd(3, &mut rng);
            let theta = random_symmetric(3, &mut rng);
            let vec_theta = DVector::from_column_slice(theta.as_slice());
            let kron = g.kronecker(&f);
            let via_kron = 4.0 * (vec_theta.transpose() * &kron * &vec_theta)[(0, 0)];
            assert_relative_eq!(quad_form(&f, &g, &theta), via_kron, epsilon = 1e-10);
        }
    }

    #[test]
    fn quad_form_positive_definite_on_nonzero_directions() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..20 {
            let f = random_spd(2, &mut rng);
            let g = random_spd(2, &mut rng);
            let theta = random_symmetric(2, &mut rng);
            if theta.norm() < 1e-9 {
                continue;
            }
            assert!(
                quad_form(&f, &g, &theta) > 0.0,
                "quadratic form must be positive for nonzero symmetric directions"
            );
        }
    }

    #[test]
    fn noise_form_equals_quad_form_contraction() {
        // sum theta_ij Tr(a^{ij}(a^{kl})') theta_kl = 4 Tr(f theta g theta)
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let d = 3;
        let f = random_spd(d, &mut rng);
        let g = random_spd(d, &mut rng);
        let theta = random_symmetric(d, &mut rng);
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        acc += theta[(i, j)]
                            * noise_trace_form(&f, &g, (i, j), (k, l))
                            * theta[(k, l)];
                    }
                }
            }
        }
        assert_relative_eq!(acc, quad_form(&f, &g, &theta), epsilon = 1e-10);
    }

    #[test]
    fn doubling_identity_holds_to_round_off() {
        // 4 xi' (a a')_sym xi = sum (D theta)_ij Tr(a^{ij}(a^{kl})') (D theta)_kl
        // where A_sym[p][q] = Tr(a^{I(p)}(a^{I(q)})') and theta completes xi.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for d in [2usize, 3] {
            let idx = IndexBijection::new(d);
            let m = idx.m();
            let f = random_spd(d, &mut rng);
            let g = random_spd(d, &mut rng);
            let xi = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0f64));
            let theta = ell_inv_symmetric(xi.as_slice(), d).unwrap();
            let dtheta = double_diag(&theta);
            let mut rhs = 0.0;
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        for l in 0..d {
                            rhs += dtheta[(i, j)]
                                * noise_trace_form(&f, &g, (i, j), (k, l))
                                * dtheta[(k, l)];
                        }
                    }
                }
            }
            let mut lhs = 0.0;
            for p in 0..m {
                for q in 0..m {
                    lhs += 4.0
                        * xi[p]
                        * noise_trace_form(&f, &g, idx.i_pair(p), idx.i_pair(q))
                        * xi[q];
                }
            }
            assert_relative_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn doubling_norm_sandwich() {
        // |theta| <= |D theta| <= 2 |theta|, tight on the right for diagonal
        // theta and on the left as the diagonal vanishes
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..25 {
            let theta = random_symmetric(3, &mut rng);
            let dtheta = double_diag(&theta);
            let n = theta.norm();
            let dn = dtheta.norm();
            assert!(n <= dn + 1e-14);
            assert!(dn <= 2.0 * n + 1e-14);
        }
        let diag = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -2.0, 3.0]));
        assert_relative_eq!(double_diag(&diag).norm(), 2.0 * diag.norm(), epsilon = 1e-14);
        let mut hollow = DMatrix::zeros(2, 2);
        hollow[(0, 1)] = 1.5;
        hollow[(1, 0)] = 1.5;
        assert_relative_eq!(double_diag(&hollow).norm(), hollow.norm(), epsilon = 1e-14);
    }

    #[test]
    fn trace_inequalities_for_psd_matrices() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..25 {
            let t = random_spd(3, &mut rng);
            let p = random_spd(3, &mut rng);
            let e = random_spd(3, &mut rng);
            let s = random_symmetric(3, &mut rng);
            // Tr(theta psi) <= Tr(theta) Tr(psi) for PSD theta, psi
            assert!((&t * &p).trace() <= t.trace() * p.trace() + 1e-12);
            // Tr(theta s eta s) <= Tr(theta) Tr(eta) |s|^2 for PSD theta, eta
            let lhs = (&t * &s * &e * &s).trace();
            assert!(lhs <= t.trace() * e.trace() * s.norm_squared() + 1e-10);
        }
    }

    fn cir_params() -> WishartParams<f64> {
        // d = 1: L = 2, Lambda = 1, K = -1 gives dX = (4 - 2x) dt + 2 sqrt(x) dW
        WishartParams::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, -1.0),
        )
        .unwrap()
    }

    #[test]
    fn wishart_gate_examples() {
        // d = 2, L = 2I, Lambda = I: margin of 4I - 3I is 1
        let p = WishartParams::new(
            DMatrix::identity(2, 2) * 2.0,
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let rep = check_wishart_gate(&p);
        assert!(rep.pass);
        assert_relative_eq!(rep.margin, 1.0, epsilon = 1e-12);

        // boundary case L L' = (d+1) Lambda Lambda' must fail (strict gate)
        let b = WishartParams::new(
            DMatrix::identity(2, 2) * 3.0f64.sqrt(),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let rep_b = check_wishart_gate(&b);
        assert!(!rep_b.pass);
        assert!(rep_b.margin.abs() < 1e-12);

        // CIR: 4 - 2*1 = 2 > 0
        let rep_c = check_wishart_gate(&cir_params());
        assert!(rep_c.pass);
        assert_relative_eq!(rep_c.margin, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn h_delta_wishart_closed_form() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let p = WishartParams::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.0, 1.8]),
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.7]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.2, -0.1, -0.5]),
        )
        .unwrap();
        let mc = wishart_coefficients(&p);
        let d = 2.0;
        for _ in 0..5 {
            let x = SpdPoint::try_from_matrix(random_spd(2, &mut rng)).unwrap();
            for &delta in &[0.0, 0.5, 2.0] {
                let ll = &p.l * p.l.transpose();
                let gg = &p.lambda * p.lambda.transpose();
                let closed = ((ll - gg * (d + 1.0 + delta)) * x.inverse()).trace()
                    + 2.0 * p.k.trace();
                assert_relative_eq!(h_delta(&mc, delta, &x), closed, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn h_delta_is_decreasing_in_delta() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let p = cir_params();
        let mc = wishart_coefficients(&p);
        for _ in 0..5 {
            let x = SpdPoint::try_from_matrix(DMatrix::from_element(
                1,
                1,
                rng.gen_range(0.1..5.0),
            ))
            .unwrap();
            let h0 = h_delta(&mc, 0.0, &x);
            let h1 = h_delta(&mc, 1.0, &x);
            let h2 = h_delta(&mc, 3.0, &x);
            assert!(h0 >= h1 && h1 >= h2);
        }
    }

    #[test]
    fn operator_on_constant_reduces_to_potential() {
        let mc = wishart_coefficients(&cir_params())
            .with_potential(|x: &DMatrix<f64>| -x.norm())
            .with_proportional_abar(1.0);
        let c = PolyViaEll::new(
            1,
            Polynomial::new(1, vec![crate::functions::Monomial {
                coefficient: 42.0,
                exponents: vec![0],
            }])
            .unwrap(),
        )
        .unwrap();
        let x = SpdPoint::try_from_matrix(DMatrix::from_element(1, 1, 2.5)).unwrap();
        let parts = matrix_operator_eval(&mc, &c, &x).unwrap();
        assert_relative_eq!(parts.total(), -2.5, epsilon = 1e-13);
    }

    #[test]
    fn generator_of_log_det_is_h0() {
        // with V = 0, Abar = 0: F[log det](x) = H_0(x)
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let p = WishartParams::new(
            DMatrix::from_row_slice(2, 2, &[2.1, 0.0, 0.4, 1.7]),
            DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.0, 0.9]),
            DMatrix::from_row_slice(2, 2, &[-0.9, 0.1, 0.3, -1.2]),
        )
        .unwrap();
        let mc = wishart_coefficients(&p);
        let logdet = LogDetFn::new(2);
        for _ in 0..8 {
            let x = SpdPoint::try_from_matrix(random_spd(2, &mut rng)).unwrap();
            let lhs = matrix_operator_eval(&mc, &logdet, &x).unwrap().total();
            assert_relative_eq!(lhs, h_delta(&mc, 0.0, &x), epsilon = 1e-9);
        }
    }

    #[test]
    fn generator_of_norm_matches_closed_form() {
        // F[|x|] = (Tr(f'g) + Tr f Tr g)/|x| - 2 Tr(f x g x)/|x|^3 + Tr(B'x)/|x|
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let p = WishartParams::new(
            DMatrix::from_row_slice(2, 2, &[1.9, 0.2, 0.0, 2.2]),
            DMatrix::from_row_slice(2, 2, &[0.7, 0.0, 0.3, 0.8]),
            DMatrix::from_row_slice(2, 2, &[-1.1, 0.0, 0.2, -0.8]),
        )
        .unwrap();
        let mc = wishart_coefficients(&p);
        let normfn = FrobeniusNormFn::new(2);
        for _ in 0..8 {
            let xm = random_spd(2, &mut rng);
            let x = SpdPoint::try_from_matrix(xm.clone()).unwrap();
            let f = mc.f(&xm);
            let g = mc.g(&xm);
            let b = mc.b(&xm);
            let r = xm.norm();
            let closed = ((&f.transpose() * &g).trace() + f.trace() * g.trace()) / r
                - 2.0 * (&f * &xm * &g * &xm).trace() / (r * r * r)
                + (&b.transpose() * &xm).trace() / r;
            let lhs = matrix_operator_eval(&mc, &normfn, &x).unwrap().total();
            assert_relative_eq!(lhs, closed, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_det_gradient_and_hessian_action() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let xm = random_spd(3, &mut rng);
        let x = SpdPoint::try_from_matrix(xm.clone()).unwrap();
        let grad = log_det_gradient(&xm).unwrap();
        assert_relative_eq!((&grad - x.inverse()).norm(), 0.0, epsilon = 1e-12);
        // finite-difference check of the Hessian action along symmetric directions
        let theta = random_symmetric(3, &mut rng);
        let psi = random_symmetric(3, &mut rng);
        let h = 1e-5;
        // directional second derivative via central differences of
        // t,s -> log det(x + t theta + s psi)
        let f = |t: f64, s: f64| (&xm + &theta * t + &psi * s).determinant().ln();
        let fd = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
        assert_relative_eq!(
            log_det_hessian_action(&x, &theta, &psi),
            fd,
            epsilon = 1e-5
        );
    }

    #[test]
    fn matrix_lyapunov_values() {
        // phi0 with c_lo = 1, c_hi = 1, C = 0, n0 = 1 at x = 10 (d = 1,
        // |x| = 10 > n0 + 2 so eta = 1): -log(10) + 10 = 7.697...
        let params = MatrixLyapunovParams {
            c_lo: 1.0,
            c_hi: 1.0,
            n0: 1.0,
            offset: 0.0,
        };
        let x = SpdPoint::try_from_matrix(DMatrix::from_element(1, 1, 10.0)).unwrap();
        assert_relative_eq!(
            phi0_matrix(&params, &x),
            10.0 - 10.0f64.ln(),
            epsilon = 1e-12
        );
        // inside the cutoff region (|x| = 0.5 < n0 + 1) the norm term vanishes
        let y = SpdPoint::try_from_matrix(DMatrix::from_element(1, 1, 0.5)).unwrap();
        assert_relative_eq!(phi0_matrix(&params, &y), -0.5f64.ln(), epsilon = 1e-12);
        // psi0 = k_lo log det - k_hi |x| eta
        assert_relative_eq!(
            psi0_matrix(2.0, 3.0, 1.0, &x),
            2.0 * 10.0f64.ln() - 30.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn matrix_lyapunov_fn_derivatives_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let lyap = MatrixLyapunovFn {
            d: 2,
            w_logdet: -0.25,
            w_norm: 0.8,
            n0: 0.5,
            offset: 3.0,
        };
        // pick a point with |x| inside the cutoff transition so eta' != 0
        let base = random_spd(2, &mut rng);
        let xm = &base * (1.9 / base.norm());
        assert!(xm.norm() > 1.5 && xm.norm() < 2.5);
        let h = 1e-6;
        let grad = SpdC2Fn::<f64>::grad(&lyap, &xm);
        let hess = SpdC2Fn::<f64>::hessian(&lyap, &xm);
        let idx = IndexBijection::new(2);
        // full-matrix finite differences (perturb single entries)
        for q1 in 0..4 {
            let (i, j) = idx.j_pair(q1);
            let mut xp = xm.clone();
            let mut xn = xm.clone();
            xp[(i, j)] += h;
            xn[(i, j)] -= h;
            let fd = (SpdC2Fn::<f64>::value(&lyap, &xp) - SpdC2Fn::<f64>::value(&lyap, &xn))
                / (2.0 * h);
            assert_relative_eq!(grad[(i, j)], fd, epsilon = 1e-5);
            // larger step for second differences to keep cancellation error
            // below the truncation error
            let h2 = 1e-4;
            for q2 in 0..4 {
                let (k, l) = idx.j_pair(q2);
                let mut xpp = xm.clone();
                let mut xpn = xm.clone();
                let mut xnp = xm.clone();
                let mut xnn = xm.clone();
                xpp[(i, j)] += h2;
                xpp[(k, l)] += h2;
                xpn[(i, j)] += h2;
                xpn[(k, l)] -= h2;
                xnp[(i, j)] -= h2;
                xnp[(k, l)] += h2;
                xnn[(i, j)] -= h2;
                xnn[(k, l)] -= h2;
                let fd2 = (SpdC2Fn::<f64>::value(&lyap, &xpp)
                    - SpdC2Fn::<f64>::value(&lyap, &xpn)
                    - SpdC2Fn::<f64>::value(&lyap, &xnp)
                    + SpdC2Fn::<f64>::value(&lyap, &xnn))
                    / (4.0 * h2 * h2);
                assert_relative_eq!(hess[(q1, q2)], fd2, epsilon = 1e-4, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn identification_identity_on_random_points() {
        // F_matrix[v](x) = F_vector[v o ell_inv](ell(x)) for polynomial v
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let p = WishartParams::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.0, 2.3]),
            DMatrix::from_row_slice(2, 2, &[0.8, 0.0, 0.2, 0.9]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -0.7]),
        )
        .unwrap();
        let mc = wishart_coefficients(&p)
            .with_potential(|x: &DMatrix<f64>| -x.norm_squared())
            .with_proportional_abar(0.6);
        let field = vectorize(&mc);
        let idx = IndexBijection::new(2);
        // v = y0^2 y1 - 2 y2^3 + y0 y2 + 5 in flattened coordinates
        let poly = Polynomial::new(
            idx.m(),
            vec![
                crate::functions::Monomial { coefficient: 1.0, exponents: vec![2, 1, 0] },
                crate::functions::Monomial { coefficient: -2.0, exponents: vec![0, 0, 3] },
                crate::functions::Monomial { coefficient: 1.0, exponents: vec![1, 0, 1] },
                crate::functions::Monomial { coefficient: 5.0, exponents: vec![0, 0, 0] },
            ],
        )
        .unwrap();
        let v_mat = PolyViaEll::new(2, poly.clone()).unwrap();
        for _ in 0..20 {
            let x = SpdPoint::try_from_matrix(random_spd(2, &mut rng)).unwrap();
            let lhs = matrix_operator_eval(&mc, &v_mat, &x).unwrap().total();
            let y = ell(x.matrix());
            let rhs = field.eval_operator(&poly, y.as_slice()).unwrap();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-11, epsilon = 1e-11);
        }
    }

    #[test]
    fn fphi0_upper_bound_wishart_sweep() {
        // CIR instance with V = -|x| and kappa = 1; growth constants
        // alpha1 = 1 (Tr f Tr g = x), beta1 = 2, gamma1 = 1.
        let mc = wishart_coefficients(&cir_params())
            .with_potential(|x: &DMatrix<f64>| -x.norm())
            .with_proportional_abar(1.0);
        let lyap = MatrixLyapunovParams {
            c_lo: 0.05,
            c_hi: 0.1,
            n0: 1.0,
            offset: 0.0,
        };
        // synthesize the bound constant on a probe set, then check a sweep
        let probe: Vec<f64> = (1..=40).map(|k| k as f64 * 0.25).collect();
        let mut c_needed = f64::NEG_INFINITY;
        for &xv in &probe {
            let x = SpdPoint::try_from_matrix(DMatrix::from_element(1, 1, xv)).unwrap();
            let chk =
                fphi0_upper_bound(&mc, &lyap, 1.0, 1.0, 2.0, 1.0, 0.0, &x).unwrap();
            c_needed = c_needed.max(chk.lhs - chk.rhs);
        }
        let bound_c = c_needed + 1.0;
        for k in 1..=120 {
            let xv = 0.07 * k as f64 + 0.013;
            let x = SpdPoint::try_from_matrix(DMatrix::from_element(1, 1, xv)).unwrap();
            let chk =
                fphi0_upper_bound(&mc, &lyap, 1.0, 1.0, 2.0, 1.0, bound_c, &x).unwrap();
            assert!(
                chk.holds,
                "bound must hold at x = {xv}: lhs {} rhs {}",
                chk.lhs, chk.rhs
            );
        }
    }

    #[test]
    fn vectorized_cir_is_the_expected_scalar_field() {
        // d = 1 Wishart (CIR): A(y) = 4y, B(y) = 4 - 2y
        let mc = wishart_coefficients(&cir_params())
            .with_potential(|x: &DMatrix<f64>| -x[(0, 0)])
            .with_proportional_abar(1.0);
        let field = vectorize(&mc);
        for &y in &[0.5, 1.0, 3.7] {
            assert_relative_eq!(field.a(&[y])[(0, 0)], 4.0 * y, epsilon = 1e-13);
            assert_relative_eq!(field.abar(&[y])[(0, 0)], 4.0 * y, epsilon = 1e-13);
            assert_relative_eq!(field.b(&[y])[0], 4.0 - 2.0 * y, epsilon = 1e-13);
            assert_relative_eq!(field.v(&[y]), -y, epsilon = 1e-13);
        }
    }
}
