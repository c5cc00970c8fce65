//! Reference stepper for one-dimensional linear parabolic equations
//!
//! ```text
//! d/dt w = 1/2 a(x) w'' + b(x) w' + c(x) w
//! ```
//!
//! on a uniform grid, written directly as a forward-Euler central-difference
//! loop with frozen boundary values. The exponential transform `w = e^{k v}`
//! turns the quadratic-gradient equation with `Abar = k A` into this linear
//! form with `c = k V`, so this stepper is an independent oracle for
//! linearizable instances: compare `(1/k) log w` on an interior region far
//! from the frozen faces.

/// Uniform grid `x_lo + i h`, `i = 0..n`, `h = (x_hi - x_lo) / (n - 1)`.
pub fn uniform_grid(x_lo: f64, x_hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 3 && x_hi > x_lo);
    let h = (x_hi - x_lo) / (n - 1) as f64;
    (0..n).map(|i| x_lo + i as f64 * h).collect()
}

/// One forward-Euler step of the linear equation; boundary values stay
/// frozen. `w` is updated in place.
pub fn step_linear_1d(
    xs: &[f64],
    w: &mut [f64],
    a: &dyn Fn(f64) -> f64,
    b: &dyn Fn(f64) -> f64,
    c: &dyn Fn(f64) -> f64,
    dt: f64,
) {
    let n = xs.len();
    assert_eq!(w.len(), n);
    let h = xs[1] - xs[0];
    let prev = w.to_vec();
    for i in 1..n - 1 {
        let x = xs[i];
        let second = (prev[i + 1] - 2.0 * prev[i] + prev[i - 1]) / (h * h);
        let first = (prev[i + 1] - prev[i - 1]) / (2.0 * h);
        w[i] = prev[i] + dt * (0.5 * a(x) * second + b(x) * first + c(x) * prev[i]);
    }
}

/// Integrates the linear equation from `w0` to time `t` with fixed step `dt`
/// (the last step is shortened to land exactly on `t`).
pub fn solve_linear_1d(
    xs: &[f64],
    w0: impl Fn(f64) -> f64,
    a: impl Fn(f64) -> f64,
    b: impl Fn(f64) -> f64,
    c: impl Fn(f64) -> f64,
    t: f64,
    dt: f64,
) -> Vec<f64> {
    assert!(t >= 0.0 && dt > 0.0);
    let mut w: Vec<f64> = xs.iter().map(|&x| w0(x)).collect();
    let mut remaining = t;
    while remaining > 0.0 {
        let step = dt.min(remaining);
        step_linear_1d(xs, &mut w, &a, &b, &c, step);
        remaining -= step;
    }
    w
}
