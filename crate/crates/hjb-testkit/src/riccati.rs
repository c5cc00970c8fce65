//! Riccati ODE oracle for the linear-quadratic family.
//!
//! For coefficients `A = a0`, `Abar = kappa a0`, `B(x) = -beta x`,
//! `V(x) = -gamma x^2 + v0` in one dimension, the Cauchy solution with
//! quadratic initial data is `v(t, x) = -a(t) x^2 / 2 + b(t)` where
//!
//! ```text
//! a' = -kappa a0 a^2 - 2 beta a + 2 gamma,   a(0) = a_init,
//! b' = -a0 a / 2 + v0,                        b(0) = b_init,
//! ```
//!
//! (substitute the ansatz into `d/dt v = F[v]` and match the `x^2` and
//! constant coefficients). The stationary point is
//! `a_inf = (-beta + sqrt(beta^2 + 2 kappa a0 gamma)) / (kappa a0)` and the
//! ergodic constant is `lambda = -a0 a_inf / 2 + v0`.

/// Parameters of the one-dimensional linear-quadratic family.
#[derive(Clone, Copy, Debug)]
pub struct LqParams {
    /// Diffusion coefficient `a0 > 0`.
    pub a0: f64,
    /// Proportionality `Abar = kappa a0`.
    pub kappa: f64,
    /// Drift slope: `B(x) = -beta x`.
    pub beta: f64,
    /// Potential curvature: `V(x) = -gamma x^2 + v0`.
    pub gamma: f64,
    /// Potential offset.
    pub v0: f64,
}

/// Riccati state `(a, b)` so that `v(t, x) = -a x^2/2 + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiccatiState {
    /// Quadratic coefficient.
    pub a: f64,
    /// Constant coefficient.
    pub b: f64,
}

fn rhs(p: &LqParams, s: RiccatiState) -> (f64, f64) {
    let da = -p.kappa * p.a0 * s.a * s.a - 2.0 * p.beta * s.a + 2.0 * p.gamma;
    let db = -p.a0 * s.a / 2.0 + p.v0;
    (da, db)
}

/// Integrates the Riccati system with classical fourth-order Runge-Kutta.
pub fn integrate(p: &LqParams, init: RiccatiState, t: f64, dt: f64) -> RiccatiState {
    assert!(dt > 0.0 && t >= 0.0);
    let steps = (t / dt).ceil() as usize;
    let h = if steps == 0 { 0.0 } else { t / steps as f64 };
    let mut s = init;
    for _ in 0..steps {
        let (k1a, k1b) = rhs(p, s);
        let s2 = RiccatiState { a: s.a + 0.5 * h * k1a, b: s.b + 0.5 * h * k1b };
        let (k2a, k2b) = rhs(p, s2);
        let s3 = RiccatiState { a: s.a + 0.5 * h * k2a, b: s.b + 0.5 * h * k2b };
        let (k3a, k3b) = rhs(p, s3);
        let s4 = RiccatiState { a: s.a + h * k3a, b: s.b + h * k3b };
        let (k4a, k4b) = rhs(p, s4);
        s = RiccatiState {
            a: s.a + h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a),
            b: s.b + h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b),
        };
    }
    s
}

/// Samples the trajectory at `0, dt_out, 2 dt_out, ..., t_end`, integrating
/// with internal step `dt`.
pub fn trajectory(
    p: &LqParams,
    init: RiccatiState,
    t_end: f64,
    dt_out: f64,
    dt: f64,
) -> Vec<(f64, RiccatiState)> {
    let n = (t_end / dt_out).round() as usize;
    let mut out = Vec::with_capacity(n + 1);
    let mut s = init;
    out.push((0.0, s));
    for k in 1..=n {
        s = integrate(p, s, dt_out, dt);
        out.push((k as f64 * dt_out, s));
    }
    out
}

/// Stationary quadratic coefficient `a_inf` (positive root).
pub fn a_stationary(p: &LqParams) -> f64 {
    let disc = p.beta * p.beta + 2.0 * p.kappa * p.a0 * p.gamma;
    assert!(disc >= 0.0, "stationary Riccati equation has no real root");
    (-p.beta + disc.sqrt()) / (p.kappa * p.a0)
}

/// Ergodic constant `lambda = -a0 a_inf / 2 + v0`.
pub fn lambda_stationary(p: &LqParams) -> f64 {
    -p.a0 * a_stationary(p) / 2.0 + p.v0
}

/// Value of the oracle solution at `(t, x)`.
pub fn value(p: &LqParams, init: RiccatiState, t: f64, x: f64, dt: f64) -> f64 {
    let s = integrate(p, init, t, dt);
    -s.a * x * x / 2.0 + s.b
}

#[cfg(test)]
mod tests {
    /// The acceptance instance: a' = -a^2 - 2a + 3, so a_inf = 1 and
    /// lambda = -0.5.
    const P: super::LqParams = super::LqParams {
        a0: 1.0,
        kappa: 1.0,
        beta: 1.0,
        gamma: 1.5,
        v0: 0.0,
    };

    #[test]
    fn stationary_values_match_closed_form() {
        assert!((super::a_stationary(&P) - 1.0).abs() < 1e-15);
        assert!((super::lambda_stationary(&P) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn integration_converges_to_stationary_point() {
        let s = super::integrate(
            &P,
            super::RiccatiState { a: 0.0, b: 0.0 },
            10.0,
            1e-4,
        );
        assert!((s.a - 1.0).abs() < 1e-10, "a(10) = {}", s.a);
        // b'(t) -> -1/2, so b(t) ~ -t/2 + const for large t
        let s2 = super::integrate(&P, s, 1.0, 1e-4);
        assert!((s2.b - s.b + 0.5).abs() < 1e-9);
    }

    #[test]
    fn rk4_self_convergence_is_fourth_order() {
        let coarse = super::integrate(&P, super::RiccatiState { a: 0.0, b: 0.0 }, 1.0, 1e-2);
        let fine = super::integrate(&P, super::RiccatiState { a: 0.0, b: 0.0 }, 1.0, 5e-3);
        let finest = super::integrate(&P, super::RiccatiState { a: 0.0, b: 0.0 }, 1.0, 2.5e-3);
        let e1 = (coarse.a - finest.a).abs();
        let e2 = (fine.a - finest.a).abs();
        assert!(e1 / e2 > 8.0, "expected ~16x error reduction, got {}", e1 / e2);
    }

    #[test]
    fn closed_form_exponential_rate() {
        // For the acceptance instance the Riccati equation linearized at
        // a_inf = 1 has rate a'(a_inf) = -2 a_inf - 2 = -4; check the decay.
        let s5 = super::integrate(&P, super::RiccatiState { a: 0.0, b: 0.0 }, 5.0, 1e-4);
        let s6 = super::integrate(&P, super::RiccatiState { a: 0.0, b: 0.0 }, 6.0, 1e-4);
        let r = (s6.a - 1.0).abs() / (s5.a - 1.0).abs();
        assert!((r - (-4.0f64).exp()).abs() < 1e-3, "rate ratio {r}");
    }
}
