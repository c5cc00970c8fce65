//! Closed-form moments of reference diffusions.
//!
//! Square-root (CIR) process `dX = (a - b X) dt + sigma sqrt(X) dW`:
//! the mean solves a linear ODE, the variance follows from the Ito isometry:
//!
//! ```text
//! E[X_t]   = a/b + (x0 - a/b) e^{-b t},
//! Var[X_t] = x0 sigma^2/b (e^{-bt} - e^{-2bt}) + a sigma^2/(2 b^2) (1 - e^{-bt})^2.
//! ```
//!
//! Ornstein-Uhlenbeck `dX = -beta X dt + sigma dW`:
//! `E[X_t] = x0 e^{-beta t}`, `Var[X_t] = sigma^2 (1 - e^{-2 beta t})/(2 beta)`.
//!
//! Matrix square-root flow `dX = (L L' + K X + X K') dt + noise` with
//! `K = k I`: the mean solves `d/dt M = L L' + 2 k M`, so
//! `M(t) = e^{2kt} x0 + (e^{2kt} - 1)/(2k) L L'`.

use nalgebra::DMatrix;

/// CIR mean `E[X_t]` for `dX = (a - b X) dt + sigma sqrt(X) dW`.
pub fn cir_mean(a: f64, b: f64, x0: f64, t: f64) -> f64 {
    let m = a / b;
    m + (x0 - m) * (-b * t).exp()
}

/// CIR variance `Var[X_t]`.
pub fn cir_variance(a: f64, b: f64, sigma: f64, x0: f64, t: f64) -> f64 {
    let e1 = (-b * t).exp();
    let e2 = (-2.0 * b * t).exp();
    x0 * sigma * sigma / b * (e1 - e2) + a * sigma * sigma / (2.0 * b * b) * (1.0 - e1) * (1.0 - e1)
}

/// Ornstein-Uhlenbeck mean `E[X_t]` for `dX = -beta X dt + sigma dW`.
pub fn ou_mean(beta: f64, x0: f64, t: f64) -> f64 {
    x0 * (-beta * t).exp()
}

/// Ornstein-Uhlenbeck variance `Var[X_t]`.
pub fn ou_variance(beta: f64, sigma: f64, t: f64) -> f64 {
    sigma * sigma * (1.0 - (-2.0 * beta * t).exp()) / (2.0 * beta)
}

/// Mean of the matrix square-root flow with `K = k I`:
/// `E[X_t] = e^{2kt} x0 + (e^{2kt} - 1)/(2k) L L'`.
pub fn matrix_mean_diag_k(ll_t: &DMatrix<f64>, k: f64, x0: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    assert!(k != 0.0, "k = 0 has the degenerate form x0 + t L L'");
    let e = (2.0 * k * t).exp();
    x0 * e + ll_t * ((e - 1.0) / (2.0 * k))
}
