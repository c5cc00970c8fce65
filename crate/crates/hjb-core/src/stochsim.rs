//! Monte Carlo verification stack: tilted diffusions, the Wishart process,
//! and path-functional estimates cross-checked against the PDE solvers.
//!
//! The tilted diffusion under ℙ^{φ,x} follows
//! dX = (B(X) + Ā(X)∇φ(X)) dt + a(X) dW with a = √A (principal root);
//! with φ = v̂ this is the ergodic-limit dynamics under which the
//! convergence functionals
//!
//! ```text
//! f(t,T,x)   = ½ Ê^x[ ∫₀^t (∇h)′ Ā ∇h (T−s, X_s) ds ],
//! supdev     = Ê^x[ sup_{0≤s≤t} |h(T,x) − h(T−s,X_s)| ],
//! z_energy   = Ê^x[ ∫₀^t ‖a′∇h(T−s,X_s)‖² ds ]  ( = ∫ ∇h′A∇h ),
//! ```
//!
//! are estimated ([`mc_convergence_functionals`], [`bsde_residuals`]) and the
//! cross-identity f(t,T,x) = h(T,x) − Ê^x[h(T−t,X_t)] is scored in standard
//! errors ([`mc_identity_check`]). The sandwich functional
//! ψ(t,x;ζ) = φ₀(x) + (1/ζ) log E^{ℙ^{φ₀,x}}[exp(ζ(v₀−φ₀)(X_t) +
//! ζ∫₀^t 𝔉[φ₀](X_s) ds)] brackets the Cauchy solution between the κ̲/κ̄
//! tilts ([`mc_sandwich`]). The Wishart simulator ([`simulate_wishart`])
//! advances dX = (LL′ + KX + XK′) dt + √X dW Λ′ + Λ dW′ √X entrywise with a
//! counted spectral clip at a scale-relative floor.
//!
//! Determinism: every path draws from its own counter-indexed ChaCha stream
//! derived from (base seed, path index), so bundles are bit-identical for
//! any thread count; accumulations are pairwise sums in path order.

use crate::coeffs::CoefficientField;
use crate::error::{HjbError, Result};
use crate::grid::Grid;
use crate::linalg::{clip_spectrum, spd_sqrt};
use crate::matrixdom::{ell, WishartParams};
use crate::pdesolve::{compute_h, ErgodicPair, SolutionField, SolutionHistory};
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// Default effective-sample-size floor for exponential (log-mean-exp)
/// estimators; below it the estimate carries a variance warning.
pub const DEFAULT_ESS_FLOOR: f64 = 100.0;

/// Default clip-rate threshold above which a Wishart bundle carries a
/// scheme warning.
pub const DEFAULT_CLIP_WARN_THRESHOLD: f64 = 1e-3;

/// Simulation configuration shared by the path generators.
#[derive(Clone, Debug)]
pub struct SimConfig<T: Scalar> {
    /// Number of paths (antithetic pairs count as two paths).
    pub n_paths: usize,
    /// Euler–Maruyama step.
    pub dt: T,
    /// Horizon T; the default save grid is the single time {T}.
    pub horizon: T,
    /// Base seed; path p draws from ChaCha stream (seed, p).
    pub seed: u64,
    /// Antithetic pairing: odd paths reuse the preceding stream with
    /// negated increments.
    pub antithetic: bool,
    /// Scale-relative eigenvalue floor for the Wishart PSD projection.
    pub eps_psd: T,
    /// Times at which states are saved (ascending, within [0, horizon]).
    pub save_times: Vec<T>,
    /// Effective-sample-size floor for exponential estimators.
    pub ess_floor: f64,
    /// Clip-rate threshold for the Wishart scheme warning.
    pub clip_warn_threshold: f64,
}

impl<T: Scalar> SimConfig<T> {
    /// Validated configuration with default knobs (no antithetic pairing,
    /// eps_psd = 1e-12, save only at the horizon).
    pub fn new(n_paths: usize, dt: T, horizon: T, seed: u64) -> Result<Self> {
        if n_paths == 0 {
            return Err(HjbError::invalid("n_paths must be at least 1"));
        }
        if !(dt.as_f64() > 0.0 && dt.as_f64().is_finite()) {
            return Err(HjbError::invalid(format!(
                "simulation step must be positive, got {}",
                dt.as_f64()
            )));
        }
        if !(horizon.as_f64() > 0.0 && horizon.as_f64().is_finite()) {
            return Err(HjbError::invalid(format!(
                "horizon must be positive, got {}",
                horizon.as_f64()
            )));
        }
        Ok(SimConfig {
            n_paths,
            dt,
            horizon,
            seed,
            antithetic: false,
            eps_psd: T::lit(1e-12),
            save_times: vec![horizon],
            ess_floor: DEFAULT_ESS_FLOOR,
            clip_warn_threshold: DEFAULT_CLIP_WARN_THRESHOLD,
        })
    }

    /// Enables or disables antithetic pairing.
    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    /// Sets the PSD-projection floor (must be nonnegative).
    pub fn with_eps_psd(mut self, eps: T) -> Result<Self> {
        if eps < T::zero() || !eps.as_f64().is_finite() {
            return Err(HjbError::invalid(format!(
                "eps_psd must be nonnegative, got {}",
                eps.as_f64()
            )));
        }
        self.eps_psd = eps;
        Ok(self)
    }

    /// Replaces the save grid (ascending, nonempty, within [0, horizon]).
    pub fn with_save_times(mut self, times: Vec<T>) -> Result<Self> {
        if times.is_empty() {
            return Err(HjbError::invalid("save grid must be nonempty"));
        }
        let eps = 1e-9 * self.horizon.as_f64().max(1.0);
        for w in times.windows(2) {
            if w[1] <= w[0] {
                return Err(HjbError::invalid("save times must be strictly increasing"));
            }
        }
        if times[0] < T::zero() || times.last().copied().expect("nonempty").as_f64()
            > self.horizon.as_f64() + eps
        {
            return Err(HjbError::invalid(
                "save times must lie within [0, horizon]",
            ));
        }
        self.save_times = times;
        Ok(self)
    }

    /// Stream index and increment sign for a path: antithetic pairs share a
    /// stream with opposite signs.
    fn stream_and_sign(&self, path: usize) -> (u64, T) {
        if self.antithetic {
            let sign = if path.is_multiple_of(2) {
                T::one()
            } else {
                -T::one()
            };
            ((path / 2) as u64, sign)
        } else {
            (path as u64, T::one())
        }
    }

    fn rng_for(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Gradient field ∇φ supplying the tilt.
pub enum GradientSource<'a, T: Scalar> {
    /// Closure writing ∇φ(x) into the output slice.
    Analytic(&'a (dyn Fn(&[T], &mut [T]) + Sync)),
    /// Nodal gradients interpolated multilinearly from recorded slices
    /// (a single slice gives a stationary tilt such as ∇v̂).
    Grid(&'a SolutionHistory<T>),
}

/// The drift B + Ā∇φ of the tilted diffusion, with a = √A as diffusion
/// factor. With a [`GradientSource::Grid`] source the grid box doubles as
/// the truncation domain: paths leaving it are frozen and flagged.
pub struct TiltedDrift<'a, T: Scalar> {
    field: &'a CoefficientField<T>,
    source: GradientSource<'a, T>,
    frozen_sqrt: Option<DMatrix<T>>,
}

impl<'a, T: Scalar> TiltedDrift<'a, T> {
    /// Couples a coefficient field with a gradient source of matching
    /// dimension.
    pub fn new(field: &'a CoefficientField<T>, source: GradientSource<'a, T>) -> Result<Self> {
        if let GradientSource::Grid(hist) = &source {
            if hist.grid().dim() != field.dim() {
                return Err(HjbError::DimensionMismatch {
                    expected: field.dim(),
                    got: hist.grid().dim(),
                    context: "tilt gradient grid".to_string(),
                });
            }
        }
        Ok(TiltedDrift {
            field,
            source,
            frozen_sqrt: None,
        })
    }

    /// Caches a = √A evaluated at `x` and reuses it at every state. Only
    /// valid when the diffusion matrix A is state-independent; the caller
    /// asserts that.
    pub fn with_cached_diffusion_at(mut self, x: &[T]) -> Result<Self> {
        self.frozen_sqrt = Some(spd_sqrt(&self.field.a(x), T::lit(1e-9))?);
        Ok(self)
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// The coefficient field behind the tilt.
    pub fn coefficients(&self) -> &CoefficientField<T> {
        self.field
    }

    /// The truncation box, when the gradient lives on a grid.
    pub fn domain_grid(&self) -> Option<&Arc<Grid<T>>> {
        match &self.source {
            GradientSource::Analytic(_) => None,
            GradientSource::Grid(hist) => Some(hist.grid()),
        }
    }

    fn grad_into(&self, t: T, x: &[T], out: &mut [T]) -> Result<()> {
        match &self.source {
            GradientSource::Analytic(f) => {
                f(x, out);
                Ok(())
            }
            GradientSource::Grid(hist) => hist.gradient_at(t, x, out),
        }
    }

    /// Tilted drift B(x) + Ā(x)∇φ(x).
    pub fn drift(&self, t: T, x: &[T]) -> Result<DVector<T>> {
        let d = self.field.dim();
        if x.len() != d {
            return Err(HjbError::DimensionMismatch {
                expected: d,
                got: x.len(),
                context: "tilted drift state".to_string(),
            });
        }
        let mut g = vec![T::zero(); d];
        self.grad_into(t, x, &mut g)?;
        let mut out = self.field.b(x);
        let abar = self.field.abar(x);
        for k in 0..d {
            let mut s = T::zero();
            for l in 0..d {
                s += abar[(k, l)] * g[l];
            }
            out[k] += s;
        }
        Ok(out)
    }

    /// Diffusion factor a(x) = √A(x) (principal square root).
    pub fn diffusion_sqrt(&self, x: &[T]) -> Result<DMatrix<T>> {
        match &self.frozen_sqrt {
            Some(a) => Ok(a.clone()),
            None => spd_sqrt(&self.field.a(x), T::lit(1e-9)),
        }
    }
}

/// Saved trajectories plus exit/clip diagnostics. States are vectors; the
/// Wishart simulator stores the canonical flattening (distinct entries) of
/// each matrix state.
#[derive(Clone, Debug)]
pub struct PathBundle<T: Scalar> {
    /// Save times shared by all paths, ascending.
    pub save_times: Vec<T>,
    /// Per-path states at the save times: `states[path][save]`.
    pub states: Vec<Vec<DVector<T>>>,
    /// Stream index each path drew from.
    pub seeds: Vec<u64>,
    /// Whether the path left the truncation domain (or went non-finite)
    /// and was frozen at the exit point.
    pub exited: Vec<bool>,
    /// Executed Euler steps summed over paths.
    pub total_steps: usize,
    /// Steps on which the PSD projection clipped at least one eigenvalue.
    pub clip_events: usize,
    /// Set when the clip rate exceeds the configured threshold.
    pub scheme_warning: Option<String>,
}

impl<T: Scalar> PathBundle<T> {
    /// Number of paths.
    pub fn n_paths(&self) -> usize {
        self.states.len()
    }

    /// Fraction of paths that exited and were frozen.
    pub fn exit_fraction(&self) -> f64 {
        if self.exited.is_empty() {
            return 0.0;
        }
        self.exited.iter().filter(|&&e| e).count() as f64 / self.exited.len() as f64
    }

    /// Fraction of executed steps on which the PSD projection clipped.
    pub fn clip_fraction(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            self.clip_events as f64 / self.total_steps as f64
        }
    }
}

struct PathOutcome<T: Scalar> {
    states: Vec<DVector<T>>,
    exited: bool,
    stream: u64,
    steps: usize,
    clips: usize,
}

fn vector_finite<T: Scalar>(v: &DVector<T>) -> bool {
    v.iter().all(|x| x.as_f64().is_finite())
}

fn matrix_finite<T: Scalar>(m: &DMatrix<T>) -> bool {
    m.iter().all(|x| x.as_f64().is_finite())
}

/// Simulates the tilted diffusion dX = (B + Ā∇φ)(X) dt + √A(X) dW from
/// `x0`, saving states at the configured save times. Paths that leave the
/// gradient grid's box are frozen at the boundary crossing and flagged;
/// non-finite states freeze at the last finite state. Fails with an
/// empty-estimate error if every path exits.
pub fn simulate_tilted<T: Scalar>(
    drift: &TiltedDrift<'_, T>,
    x0: &[T],
    cfg: &SimConfig<T>,
) -> Result<PathBundle<T>> {
    let d = drift.dim();
    if x0.len() != d {
        return Err(HjbError::DimensionMismatch {
            expected: d,
            got: x0.len(),
            context: "simulation start point".to_string(),
        });
    }
    if let Some(grid) = drift.domain_grid() {
        if !grid.contains(x0) {
            return Err(HjbError::DomainViolation {
                details: format!(
                    "start point {:?} lies outside the truncation box",
                    x0.iter().map(|v| v.as_f64()).collect::<Vec<_>>()
                ),
            });
        }
    }
    let start = DVector::from_column_slice(x0);
    let outcomes: Vec<PathOutcome<T>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| run_tilted_path(drift, &start, cfg, p))
        .collect::<Result<_>>()?;
    bundle_from_outcomes(outcomes, cfg)
}

fn run_tilted_path<T: Scalar>(
    drift: &TiltedDrift<'_, T>,
    x0: &DVector<T>,
    cfg: &SimConfig<T>,
    path: usize,
) -> Result<PathOutcome<T>> {
    let d = x0.len();
    let (stream, sign) = cfg.stream_and_sign(path);
    let mut rng = cfg.rng_for(stream);
    let mut x = x0.clone();
    let mut t = T::zero();
    let mut exited = false;
    let mut steps = 0usize;
    let mut states = Vec::with_capacity(cfg.save_times.len());
    let mut xi = DVector::zeros(d);
    for &target in &cfg.save_times {
        let snap = 1e-9 * target.as_f64().abs().max(1.0);
        while !exited && (target - t).as_f64() > snap {
            let remaining = target - t;
            let dt = if remaining < cfg.dt { remaining } else { cfg.dt };
            let b = drift.drift(t, x.as_slice())?;
            let a = match drift.diffusion_sqrt(x.as_slice()) {
                Ok(a) => a,
                // losing ellipticity means the path wandered out of the
                // coefficient field's valid region: freeze it there
                Err(HjbError::EllipticityViolation { .. }) => {
                    exited = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            for z in xi.iter_mut() {
                *z = T::standard_normal(&mut rng) * sign;
            }
            let sqdt = dt.sqrt();
            let next = &x + &b * dt + (&a * &xi) * sqdt;
            steps += 1;
            if !vector_finite(&next) {
                exited = true;
                break;
            }
            if let Some(grid) = drift.domain_grid() {
                if !grid.contains(next.as_slice()) {
                    // freeze at the exit point: the face-clamped state
                    for k in 0..d {
                        x[k] = next[k].max(grid.lo()[k]).min(grid.hi()[k]);
                    }
                    exited = true;
                    break;
                }
            }
            x = next;
            t += dt;
        }
        states.push(x.clone());
    }
    Ok(PathOutcome {
        states,
        exited,
        stream,
        steps,
        clips: 0,
    })
}

fn bundle_from_outcomes<T: Scalar>(
    outcomes: Vec<PathOutcome<T>>,
    cfg: &SimConfig<T>,
) -> Result<PathBundle<T>> {
    let mut states = Vec::with_capacity(outcomes.len());
    let mut seeds = Vec::with_capacity(outcomes.len());
    let mut exited = Vec::with_capacity(outcomes.len());
    let mut total_steps = 0usize;
    let mut clip_events = 0usize;
    for o in outcomes {
        states.push(o.states);
        seeds.push(o.stream);
        exited.push(o.exited);
        total_steps += o.steps;
        clip_events += o.clips;
    }
    if exited.iter().all(|&e| e) {
        return Err(HjbError::EmptyEstimate {
            details: "every simulated path exited the domain".to_string(),
        });
    }
    let clip_fraction = if total_steps == 0 {
        0.0
    } else {
        clip_events as f64 / total_steps as f64
    };
    let scheme_warning = if clip_fraction > cfg.clip_warn_threshold {
        Some(format!(
            "PSD projection clipped on a fraction {clip_fraction:.3e} of steps \
             (threshold {:.3e})",
            cfg.clip_warn_threshold
        ))
    } else {
        None
    };
    Ok(PathBundle {
        save_times: cfg.save_times.clone(),
        states,
        seeds,
        exited,
        total_steps,
        clip_events,
        scheme_warning,
    })
}

/// One entrywise Euler–Maruyama step of the Wishart dynamics
/// dX = (LL′ + KX + XK′) dt + √X dW Λ′ + Λ dW′ √X, followed by the spectral
/// clip at the scale-relative floor. `dw` holds standard-normal draws (the
/// √dt scaling happens here). Returns the new state and whether the clip
/// was active.
fn wishart_em_step<T: Scalar>(
    p: &WishartParams<T>,
    ll_t: &DMatrix<T>,
    x: &DMatrix<T>,
    dw: &DMatrix<T>,
    dt: T,
    eps_psd: T,
) -> Result<(DMatrix<T>, bool)> {
    let d = p.d();
    let sqdt = dt.sqrt();
    if d == 1 {
        let xv = x[(0, 0)];
        let root = if xv > T::zero() { xv.sqrt() } else { T::zero() };
        let drift = ll_t[(0, 0)] + (p.k[(0, 0)] + p.k[(0, 0)]) * xv;
        let noise = T::lit(2.0) * p.lambda[(0, 0)] * root * dw[(0, 0)] * sqdt;
        let mut next = xv + drift * dt + noise;
        let floor = eps_psd * (T::one() + xv.abs());
        let clipped = next.as_f64().is_finite() && next < floor;
        if clipped {
            next = floor;
        }
        return Ok((DMatrix::from_element(1, 1, next), clipped));
    }
    let root = spd_sqrt(x, T::lit(1e-8))?;
    let half = &root * (dw * sqdt) * p.lambda.transpose();
    let noise = &half + half.transpose();
    let drift = ll_t + &p.k * x + x * p.k.transpose();
    let next = x + drift * dt + noise;
    if !matrix_finite(&next) {
        return Ok((next, false));
    }
    let floor = eps_psd * (T::one() + x.norm());
    let (clipped_m, nclip) = clip_spectrum(&next, floor);
    Ok((clipped_m, nclip > 0))
}

/// Simulates the Wishart process from an SPD start, saving the canonical
/// flattening (distinct entries, see [`crate::matrixdom::ell`]) of each
/// matrix state. The scheme preserves symmetry exactly; cone membership is
/// maintained by the counted spectral clip.
pub fn simulate_wishart<T: Scalar>(
    p: &WishartParams<T>,
    x0: &crate::matrixdom::SpdPoint<T>,
    cfg: &SimConfig<T>,
) -> Result<PathBundle<T>> {
    if x0.d() != p.d() {
        return Err(HjbError::DimensionMismatch {
            expected: p.d(),
            got: x0.d(),
            context: "Wishart start point".to_string(),
        });
    }
    let ll_t = &p.l * p.l.transpose();
    let start = x0.matrix().clone();
    let outcomes: Vec<PathOutcome<T>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| run_wishart_path(p, &ll_t, &start, cfg, path))
        .collect::<Result<_>>()?;
    bundle_from_outcomes(outcomes, cfg)
}

fn run_wishart_path<T: Scalar>(
    p: &WishartParams<T>,
    ll_t: &DMatrix<T>,
    x0: &DMatrix<T>,
    cfg: &SimConfig<T>,
    path: usize,
) -> Result<PathOutcome<T>> {
    let d = p.d();
    let (stream, sign) = cfg.stream_and_sign(path);
    let mut rng = cfg.rng_for(stream);
    let mut x = x0.clone();
    let mut t = T::zero();
    let mut exited = false;
    let mut steps = 0usize;
    let mut clips = 0usize;
    let mut dw = DMatrix::zeros(d, d);
    let mut states = Vec::with_capacity(cfg.save_times.len());
    for &target in &cfg.save_times {
        let snap = 1e-9 * target.as_f64().abs().max(1.0);
        while !exited && (target - t).as_f64() > snap {
            let remaining = target - t;
            let dt = if remaining < cfg.dt { remaining } else { cfg.dt };
            for z in dw.iter_mut() {
                *z = T::standard_normal(&mut rng) * sign;
            }
            let (next, clipped) = wishart_em_step(p, ll_t, &x, &dw, dt, cfg.eps_psd)?;
            steps += 1;
            if !matrix_finite(&next) {
                exited = true;
                break;
            }
            if clipped {
                clips += 1;
            }
            x = next;
            t += dt;
        }
        states.push(ell(&x));
    }
    Ok(PathOutcome {
        states,
        exited,
        stream,
        steps,
        clips,
    })
}

/// Successive-difference bias measurement for the Wishart scheme: coupled
/// paths at steps dt, dt/2, dt/4 (coarse Brownian increments are sums of
/// the fine ones), reporting Tr X_T differences between adjacent
/// refinements. For a weak-order-1 scheme the coarse/fine difference ratio
/// is ≈ 2.
#[derive(Clone, Debug, Serialize)]
pub struct BiasRefinement {
    /// Estimate of E[Tr X^{dt}_T − Tr X^{dt/2}_T].
    pub diff_coarse: MCEstimate,
    /// Estimate of E[Tr X^{dt/2}_T − Tr X^{dt/4}_T].
    pub diff_fine: MCEstimate,
    /// diff_coarse / diff_fine.
    pub ratio: f64,
}

/// Runs the coupled-refinement study (see [`BiasRefinement`]). `cfg.dt` is
/// the coarse step; the horizon is divided evenly into coarse steps.
pub fn wishart_bias_refinement<T: Scalar>(
    p: &WishartParams<T>,
    x0: &crate::matrixdom::SpdPoint<T>,
    cfg: &SimConfig<T>,
) -> Result<BiasRefinement> {
    if x0.d() != p.d() {
        return Err(HjbError::DimensionMismatch {
            expected: p.d(),
            got: x0.d(),
            context: "Wishart start point".to_string(),
        });
    }
    let n_coarse = (cfg.horizon.as_f64() / cfg.dt.as_f64() - 1e-9).ceil().max(1.0) as usize;
    let dt_c = cfg.horizon / T::from_count(n_coarse);
    let dt_m = dt_c / T::lit(2.0);
    let dt_f = dt_c / T::lit(4.0);
    let ll_t = &p.l * p.l.transpose();
    let start = x0.matrix().clone();
    let d = p.d();
    let per_path = |path: usize| -> Result<(f64, f64)> {
        let (stream, sign) = cfg.stream_and_sign(path);
        let mut rng = cfg.rng_for(stream);
        let mut xc = start.clone();
        let mut xm = start.clone();
        let mut xf = start.clone();
        let mut fine = [
            DMatrix::zeros(d, d),
            DMatrix::zeros(d, d),
            DMatrix::zeros(d, d),
            DMatrix::zeros(d, d),
        ];
        for _ in 0..n_coarse {
            for dw in fine.iter_mut() {
                for z in dw.iter_mut() {
                    *z = T::standard_normal(&mut rng) * sign;
                }
            }
            for dw in &fine {
                xf = wishart_em_step(p, &ll_t, &xf, dw, dt_f, cfg.eps_psd)?.0;
            }
            // a Brownian increment over 2 fine steps is the sum of the fine
            // normals scaled back to unit variance: (ξ₁+ξ₂)/√2
            let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
            let mid1 = (&fine[0] + &fine[1]) * inv_sqrt2;
            let mid2 = (&fine[2] + &fine[3]) * inv_sqrt2;
            xm = wishart_em_step(p, &ll_t, &xm, &mid1, dt_m, cfg.eps_psd)?.0;
            xm = wishart_em_step(p, &ll_t, &xm, &mid2, dt_m, cfg.eps_psd)?.0;
            let coarse = (&mid1 + &mid2) * inv_sqrt2;
            xc = wishart_em_step(p, &ll_t, &xc, &coarse, dt_c, cfg.eps_psd)?.0;
            if !matrix_finite(&xf) || !matrix_finite(&xm) || !matrix_finite(&xc) {
                return Err(HjbError::BlowUp {
                    t: cfg.horizon.as_f64(),
                    node_index: path,
                    value: f64::NAN,
                });
            }
        }
        Ok((
            (xc.trace() - xm.trace()).as_f64(),
            (xm.trace() - xf.trace()).as_f64(),
        ))
    };
    let pairs: Vec<(f64, f64)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(per_path)
        .collect::<Result<_>>()?;
    let coarse: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let fine: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let none = vec![false; pairs.len()];
    let diff_coarse = estimate_from_samples(&coarse, &none, "bias_diff_coarse")?;
    let diff_fine = estimate_from_samples(&fine, &none, "bias_diff_fine")?;
    let ratio = diff_coarse.mean / diff_fine.mean;
    Ok(BiasRefinement {
        diff_coarse,
        diff_fine,
        ratio,
    })
}

/// A Monte Carlo estimate with its provenance. The headline mean includes
/// frozen (exited) paths; `interior_mean` excludes them when any exited.
#[derive(Clone, Debug, Serialize)]
pub struct MCEstimate {
    /// Sample mean over all paths.
    pub mean: f64,
    /// Standard error (sample std / √n_effective; delta method for
    /// log-mean-exp estimates).
    pub std_error: f64,
    /// Effective sample size (path count, or the exponential-weight ESS).
    pub n_effective: f64,
    /// What was estimated.
    pub tag: String,
    /// Fraction of paths frozen at a domain exit.
    pub exit_fraction: f64,
    /// Mean over non-exited paths, present when some path exited.
    pub interior_mean: Option<f64>,
    /// Variance/ESS warning, if any.
    pub warning: Option<String>,
}

/// Order-insensitive pairwise sum.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1..=8 => v.iter().sum(),
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

fn mean_and_sd(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    let mean = pairwise_sum(samples) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = samples.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, var.sqrt())
}

/// Builds an [`MCEstimate`] from per-path samples and their exit flags:
/// pairwise-summed mean and standard error, exit fraction, and the
/// excluding-frozen mean when only some paths exited. Errors on empty or
/// non-finite samples.
pub fn estimate_from_samples(samples: &[f64], exited: &[bool], tag: &str) -> Result<MCEstimate> {
    if samples.is_empty() {
        return Err(HjbError::EmptyEstimate {
            details: format!("no samples for {tag}"),
        });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(HjbError::EmptyEstimate {
            details: format!("non-finite samples for {tag}"),
        });
    }
    let (mean, sd) = mean_and_sd(samples);
    let n = samples.len() as f64;
    let n_exited = exited.iter().filter(|&&e| e).count();
    let interior_mean = if n_exited > 0 && n_exited < samples.len() {
        let interior: Vec<f64> = samples
            .iter()
            .zip(exited)
            .filter(|(_, &e)| !e)
            .map(|(&s, _)| s)
            .collect();
        Some(pairwise_sum(&interior) / interior.len() as f64)
    } else {
        None
    };
    Ok(MCEstimate {
        mean,
        std_error: sd / n.sqrt(),
        n_effective: n,
        tag: tag.to_string(),
        exit_fraction: n_exited as f64 / n,
        interior_mean,
        warning: None,
    })
}

/// Shift-stabilized log-mean-exp of `zeta * g` over samples g, with the
/// delta-method standard error of (1/ζ)log-mean-exp and the
/// exponential-weight effective sample size.
fn log_mean_exp(gs: &[f64], zeta: f64) -> (f64, f64, f64) {
    let m = gs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = gs.iter().map(|&g| (zeta * (g - m)).exp()).collect();
    let sum_w = pairwise_sum(&w);
    let n = w.len() as f64;
    let mean_w = sum_w / n;
    let lme = zeta * m + (mean_w).ln();
    let (_, sd_w) = mean_and_sd(&w);
    let se = sd_w / (mean_w * n.sqrt() * zeta.abs());
    let sq: Vec<f64> = w.iter().map(|&x| x * x).collect();
    let ess = sum_w * sum_w / pairwise_sum(&sq);
    (lme / zeta, se, ess)
}

/// Prepared inputs shared by the functional estimators: the h history on
/// [T−t, T], the save grid aligned with it, the simulated bundle under the
/// v̂ tilt, and h(T, x₀).
struct FunctionalPaths<T: Scalar> {
    h_hist: SolutionHistory<T>,
    bundle: PathBundle<T>,
    save_times: Vec<T>,
    h_t_x0: T,
    big_t: T,
}

fn prepare_functional_paths<T: Scalar>(
    field: &CoefficientField<T>,
    slices: &[SolutionField<T>],
    pair: &ErgodicPair<T>,
    t: T,
    big_t: T,
    x0: &[T],
    cfg: &SimConfig<T>,
) -> Result<FunctionalPaths<T>> {
    if !(t.as_f64() > 0.0 && t.as_f64().is_finite()) {
        return Err(HjbError::invalid("functional window t must be positive"));
    }
    if big_t < t {
        return Err(HjbError::invalid(format!(
            "horizon T = {} must dominate the window t = {}",
            big_t.as_f64(),
            t.as_f64()
        )));
    }
    let eps = 1e-6 * big_t.as_f64().max(1.0);
    let lo = big_t - t;
    let in_range: Vec<&SolutionField<T>> = slices
        .iter()
        .filter(|s| s.t.as_f64() >= lo.as_f64() - eps && s.t.as_f64() <= big_t.as_f64() + eps)
        .collect();
    if in_range.len() < 2 {
        return Err(HjbError::MissingSlice {
            details: format!(
                "need at least 2 solution slices in [{}, {}], found {}",
                lo.as_f64(),
                big_t.as_f64(),
                in_range.len()
            ),
        });
    }
    let first = in_range.first().expect("nonempty").t.as_f64();
    let last = in_range.last().expect("nonempty").t.as_f64();
    if (first - lo.as_f64()).abs() > eps || (last - big_t.as_f64()).abs() > eps {
        return Err(HjbError::MissingSlice {
            details: format!(
                "history must cover [T−t, T] = [{}, {}] at its endpoints, \
                 found slices spanning [{first}, {last}]",
                lo.as_f64(),
                big_t.as_f64()
            ),
        });
    }
    let max_gap = in_range
        .windows(2)
        .map(|w| w[1].t.as_f64() - w[0].t.as_f64())
        .fold(0.0f64, f64::max);
    if max_gap > t.as_f64() / 2.0 + eps {
        return Err(HjbError::MissingSlice {
            details: format!(
                "history gap {max_gap} exceeds half the window t = {}",
                t.as_f64()
            ),
        });
    }
    let grid = &in_range[0].grid;
    if !grid.contains(x0) {
        return Err(HjbError::DomainViolation {
            details: "start point lies outside the solution grid".to_string(),
        });
    }
    let mut h_hist = SolutionHistory::new(grid.clone());
    for s in &in_range {
        let h = compute_h(s, pair)?;
        h_hist.record_h(&h)?;
    }
    // save grid aligned with the slices: s_j = T − τ_{M−1−j}
    let mut save_times: Vec<T> = in_range.iter().rev().map(|s| big_t - s.t).collect();
    save_times[0] = T::zero();
    let mlast = save_times.len() - 1;
    save_times[mlast] = t;
    // stationary v̂ tilt as a one-slice history
    let mut vhat_hist = SolutionHistory::new(pair.grid.clone());
    vhat_hist.record_values(T::zero(), &pair.vhat)?;
    let drift = TiltedDrift::new(field, GradientSource::Grid(&vhat_hist))?;
    let mut sim_cfg = cfg.clone();
    sim_cfg.horizon = t;
    sim_cfg.save_times = save_times.clone();
    let bundle = simulate_tilted(&drift, x0, &sim_cfg)?;
    let h_t_x0 = h_hist.value_at(big_t, x0)?;
    Ok(FunctionalPaths {
        h_hist,
        bundle,
        save_times,
        h_t_x0,
        big_t,
    })
}

/// Per-path accumulators computed in one sweep over the saved states.
struct PathFunctionals {
    f: Vec<f64>,
    supdev: Vec<f64>,
    h_final: Vec<f64>,
    z_energy: Vec<f64>,
    z_energy_alt: Vec<f64>,
}

fn sweep_functionals<T: Scalar>(
    field: &CoefficientField<T>,
    paths: &FunctionalPaths<T>,
) -> Result<PathFunctionals> {
    let m = paths.save_times.len();
    let n = paths.bundle.n_paths();
    let d = field.dim();
    let mut out = PathFunctionals {
        f: Vec::with_capacity(n),
        supdev: Vec::with_capacity(n),
        h_final: Vec::with_capacity(n),
        z_energy: Vec::with_capacity(n),
        z_energy_alt: Vec::with_capacity(n),
    };
    let h_ref = paths.h_t_x0.as_f64();
    let mut grad = vec![T::zero(); d];
    for states in &paths.bundle.states {
        let mut f_acc = 0.0f64;
        let mut z_acc = 0.0f64;
        let mut z_alt_acc = 0.0f64;
        let mut sup = 0.0f64;
        for (j, x) in states.iter().enumerate() {
            let s = paths.save_times[j];
            let tau = paths.big_t - s;
            let h = paths.h_hist.value_at(tau, x.as_slice())?.as_f64();
            let dev = (h_ref - h).abs();
            if dev > sup {
                sup = dev;
            }
            if j + 1 < m {
                let ds = (paths.save_times[j + 1] - s).as_f64();
                paths.h_hist.gradient_at(tau, x.as_slice(), &mut grad)?;
                let abar = field.abar(x.as_slice());
                let a = field.a(x.as_slice());
                let mut q_abar = T::zero();
                let mut q_a = T::zero();
                for k in 0..d {
                    let mut s_abar = T::zero();
                    let mut s_a = T::zero();
                    for l in 0..d {
                        s_abar += abar[(k, l)] * grad[l];
                        s_a += a[(k, l)] * grad[l];
                    }
                    q_abar += grad[k] * s_abar;
                    q_a += grad[k] * s_a;
                }
                f_acc += 0.5 * q_abar.as_f64() * ds;
                z_acc += q_a.as_f64() * ds;
                // independent route through Z = a′∇h
                let root = spd_sqrt(&a, T::lit(1e-9))?;
                let mut znorm2 = T::zero();
                for k in 0..d {
                    let mut zk = T::zero();
                    for l in 0..d {
                        zk += root[(l, k)] * grad[l];
                    }
                    znorm2 += zk * zk;
                }
                z_alt_acc += znorm2.as_f64() * ds;
            }
        }
        let x_final = &states[m - 1];
        let h_final = paths
            .h_hist
            .value_at(paths.big_t - paths.save_times[m - 1], x_final.as_slice())?
            .as_f64();
        out.f.push(f_acc);
        out.supdev.push(sup);
        out.h_final.push(h_final);
        out.z_energy.push(z_acc);
        out.z_energy_alt.push(z_alt_acc);
    }
    Ok(out)
}

/// Estimates the convergence functionals under the v̂ tilt:
/// f = ½Ê[∫₀^t ∇h′Ā∇h(T−s,X_s) ds] (left-point quadrature on the
/// slice-aligned save grid) and Ê[sup_{s≤t}|h(T,x₀) − h(T−s,X_s)|].
/// `slices` must cover [T−t, T] at the simulation save resolution.
pub fn mc_convergence_functionals<T: Scalar>(
    field: &CoefficientField<T>,
    slices: &[SolutionField<T>],
    pair: &ErgodicPair<T>,
    t: T,
    big_t: T,
    x0: &[T],
    cfg: &SimConfig<T>,
) -> Result<(MCEstimate, MCEstimate)> {
    let paths = prepare_functional_paths(field, slices, pair, t, big_t, x0, cfg)?;
    let acc = sweep_functionals(field, &paths)?;
    let f_est = estimate_from_samples(&acc.f, &paths.bundle.exited, "f_est")?;
    let supdev = estimate_from_samples(&acc.supdev, &paths.bundle.exited, "supdev_est")?;
    Ok((f_est, supdev))
}

/// Result of the PDE↔SDE cross-identity f(t,T,x₀) = h(T,x₀) − Ê[h(T−t,X_t)].
#[derive(Clone, Debug, Serialize)]
pub struct IdentityCheck {
    /// Left side, the quadrature estimate of f.
    pub lhs: MCEstimate,
    /// Right side, h(T,x₀) minus the estimated mean of h(T−t, X_t).
    pub rhs: f64,
    /// |mean difference| in units of its per-path standard error.
    pub z_score: f64,
    /// The per-path difference estimate behind the score (its mean is
    /// lhs − rhs with correlations accounted for).
    pub diff: MCEstimate,
}

/// Scores the quadrature/expectation identity
/// f^{t,T}(x) = h(T,x) − Ê[h(T−t, X_t)]; the z-score uses the per-path
/// difference so the lhs/rhs correlation is accounted for.
pub fn mc_identity_check<T: Scalar>(
    field: &CoefficientField<T>,
    slices: &[SolutionField<T>],
    pair: &ErgodicPair<T>,
    t: T,
    big_t: T,
    x0: &[T],
    cfg: &SimConfig<T>,
) -> Result<IdentityCheck> {
    let paths = prepare_functional_paths(field, slices, pair, t, big_t, x0, cfg)?;
    let acc = sweep_functionals(field, &paths)?;
    let lhs = estimate_from_samples(&acc.f, &paths.bundle.exited, "f_est")?;
    let h_mean = estimate_from_samples(&acc.h_final, &paths.bundle.exited, "h_final")?;
    let rhs = paths.h_t_x0.as_f64() - h_mean.mean;
    let diffs: Vec<f64> = acc
        .f
        .iter()
        .zip(&acc.h_final)
        .map(|(&f, &h)| f - paths.h_t_x0.as_f64() + h)
        .collect();
    let diff = estimate_from_samples(&diffs, &paths.bundle.exited, "identity_diff")?;
    let z_score = if diff.std_error > 0.0 {
        diff.mean.abs() / diff.std_error
    } else if diff.mean == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(IdentityCheck {
        lhs,
        rhs,
        z_score,
        diff,
    })
}

/// Result of the exponential lower-bound check
/// (1/κ̲) log Ê[e^{κ̲ h(T−t, X_t)}] ≤ h(T, x₀).
#[derive(Clone, Debug, Serialize)]
pub struct ExponentialBound {
    /// Log-mean-exp side (the lower bound).
    pub lhs: MCEstimate,
    /// h(T, x₀).
    pub rhs: f64,
    /// rhs − lhs in units of the lhs standard error.
    pub slack_in_se: f64,
    /// Whether lhs ≤ rhs + 3·SE.
    pub satisfied: bool,
}

/// Evaluates the exponential bound with the max-shift log-mean-exp
/// estimator under the v̂ tilt.
#[allow(clippy::too_many_arguments)]
pub fn mc_exponential_bound<T: Scalar>(
    field: &CoefficientField<T>,
    slices: &[SolutionField<T>],
    pair: &ErgodicPair<T>,
    t: T,
    big_t: T,
    x0: &[T],
    kappa_lo: T,
    cfg: &SimConfig<T>,
) -> Result<ExponentialBound> {
    if !(kappa_lo.as_f64() > 0.0 && kappa_lo.as_f64().is_finite()) {
        return Err(HjbError::invalid("kappa_lo must be positive"));
    }
    let paths = prepare_functional_paths(field, slices, pair, t, big_t, x0, cfg)?;
    let acc = sweep_functionals(field, &paths)?;
    let (lme, se, ess) = log_mean_exp(&acc.h_final, kappa_lo.as_f64());
    let warning = if ess < cfg.ess_floor {
        Some(format!(
            "effective sample size {ess:.1} below the floor {}",
            cfg.ess_floor
        ))
    } else {
        None
    };
    let lhs = MCEstimate {
        mean: lme,
        std_error: se,
        n_effective: ess,
        tag: "exp_lower_bound".to_string(),
        exit_fraction: paths.bundle.exit_fraction(),
        interior_mean: None,
        warning,
    };
    let rhs = paths.h_t_x0.as_f64();
    let slack_in_se = if se > 0.0 {
        (rhs - lme) / se
    } else if lme <= rhs {
        f64::INFINITY
    } else {
        f64::NEG_INFINITY
    };
    let satisfied = lme <= rhs + 3.0 * se;
    Ok(ExponentialBound {
        lhs,
        rhs,
        slack_in_se,
        satisfied,
    })
}

/// BSDE residual estimates 𝒵-energy and 𝒴 sup-deviation.
#[derive(Clone, Debug, Serialize)]
pub struct BsdeResiduals {
    /// Ê[∫₀^t ‖a′∇h(T−s,X_s)‖² ds], accumulated through Z = a′∇h.
    pub z_energy: MCEstimate,
    /// Ê[sup_{s≤t} |h(T−s,X_s) − h(T,x₀)|].
    pub y_supdev: MCEstimate,
    /// Largest path-wise gap between the two accumulation routes
    /// ∫‖a′∇h‖² and ∫∇h′A∇h (identical up to round-off).
    pub route_gap: f64,
}

/// Estimates the BSDE residuals and asserts the internal identity between
/// the two z-energy accumulation routes.
pub fn bsde_residuals<T: Scalar>(
    field: &CoefficientField<T>,
    slices: &[SolutionField<T>],
    pair: &ErgodicPair<T>,
    t: T,
    big_t: T,
    x0: &[T],
    cfg: &SimConfig<T>,
) -> Result<BsdeResiduals> {
    let paths = prepare_functional_paths(field, slices, pair, t, big_t, x0, cfg)?;
    let acc = sweep_functionals(field, &paths)?;
    let mut route_gap = 0.0f64;
    let mut scale = 1.0f64;
    for (&a, &b) in acc.z_energy.iter().zip(&acc.z_energy_alt) {
        route_gap = route_gap.max((a - b).abs());
        scale = scale.max(a.abs());
    }
    if route_gap > 1e-8 * scale {
        return Err(HjbError::InternalConsistency {
            details: format!(
                "z-energy accumulation routes disagree by {route_gap:.3e} \
                 (scale {scale:.3e})"
            ),
        });
    }
    let z_energy = estimate_from_samples(&acc.z_energy_alt, &paths.bundle.exited, "z_energy")?;
    let y_supdev = estimate_from_samples(&acc.supdev, &paths.bundle.exited, "y_supdev")?;
    Ok(BsdeResiduals {
        z_energy,
        y_supdev,
        route_gap,
    })
}

/// An analytically specified tilt function φ₀ with the derivatives the
/// sandwich functional needs.
pub struct AnalyticTilt<'a, T: Scalar> {
    /// φ₀(x).
    pub value: &'a (dyn Fn(&[T]) -> T + Sync),
    /// Writes ∇φ₀(x) into the output slice.
    pub gradient: &'a (dyn Fn(&[T], &mut [T]) + Sync),
    /// D²φ₀(x).
    pub hessian: &'a (dyn Fn(&[T]) -> DMatrix<T> + Sync),
}

impl<'a, T: Scalar> AnalyticTilt<'a, T> {
    /// 𝔉[φ₀](x) assembled from the coefficient field and the supplied
    /// derivatives.
    fn operator_value(&self, field: &CoefficientField<T>, x: &[T], grad: &mut [T]) -> T {
        let d = field.dim();
        (self.gradient)(x, grad);
        let a = field.a(x);
        let abar = field.abar(x);
        let b = field.b(x);
        let hess = (self.hessian)(x);
        let half = T::lit(0.5);
        let mut diffusion = T::zero();
        let mut quad = T::zero();
        let mut drift = T::zero();
        for k in 0..d {
            for l in 0..d {
                diffusion += a[(k, l)] * hess[(l, k)];
                quad += grad[k] * abar[(k, l)] * grad[l];
            }
            drift += b[k] * grad[k];
        }
        half * diffusion + half * quad + drift + field.v(x)
    }
}

/// Log-mean-exp estimate of the sandwich functional
/// ψ(t,x₀;ζ) = φ₀(x₀) + (1/ζ) log Ê^{φ₀-tilt}[exp(ζ(v₀−φ₀)(X_t) +
/// ζ∫₀^t 𝔉[φ₀](X_s) ds)], with the integral on a uniform save grid
/// (left-point) and the max-shift stabilization. ζ = κ̄ gives the
/// super-solution ψ₁, ζ = κ̲ the sub-solution ψ₂.
pub fn mc_sandwich<T: Scalar>(
    field: &CoefficientField<T>,
    phi0: &AnalyticTilt<'_, T>,
    v0: &(dyn Fn(&[T]) -> T + Sync),
    zeta: T,
    t: T,
    x0: &[T],
    cfg: &SimConfig<T>,
) -> Result<MCEstimate> {
    if !(zeta.as_f64() > 0.0 && zeta.as_f64().is_finite()) {
        return Err(HjbError::invalid(format!(
            "sandwich exponent zeta must be positive, got {}",
            zeta.as_f64()
        )));
    }
    if !(t.as_f64() > 0.0 && t.as_f64().is_finite()) {
        return Err(HjbError::invalid("sandwich horizon t must be positive"));
    }
    let d = field.dim();
    if x0.len() != d {
        return Err(HjbError::DimensionMismatch {
            expected: d,
            got: x0.len(),
            context: "sandwich start point".to_string(),
        });
    }
    // uniform quadrature grid for the ∫𝔉[φ₀] term
    let n_q = ((t.as_f64() / cfg.dt.as_f64()).ceil() as usize).clamp(8, 256);
    let save_times: Vec<T> = (0..=n_q)
        .map(|j| t * T::from_count(j) / T::from_count(n_q))
        .collect();
    let mut sim_cfg = cfg.clone();
    sim_cfg.horizon = t;
    sim_cfg.save_times = save_times.clone();
    let drift = TiltedDrift::new(field, GradientSource::Analytic(phi0.gradient))?;
    let bundle = simulate_tilted(&drift, x0, &sim_cfg)?;
    let ds = (t / T::from_count(n_q)).as_f64();
    let mut grad = vec![T::zero(); d];
    let mut gs = Vec::with_capacity(bundle.n_paths());
    for states in &bundle.states {
        let mut integral = 0.0f64;
        for x in states.iter().take(n_q) {
            integral += phi0
                .operator_value(field, x.as_slice(), &mut grad)
                .as_f64()
                * ds;
        }
        let xt = states.last().expect("nonempty save grid");
        let terminal = (v0(xt.as_slice()) - (phi0.value)(xt.as_slice())).as_f64();
        gs.push(terminal + integral);
    }
    let (lme, se, ess) = log_mean_exp(&gs, zeta.as_f64());
    let warning = if ess < cfg.ess_floor {
        Some(format!(
            "effective sample size {ess:.1} below the floor {}",
            cfg.ess_floor
        ))
    } else {
        None
    };
    Ok(MCEstimate {
        mean: (phi0.value)(x0).as_f64() + lme,
        std_error: se,
        n_effective: ess,
        tag: format!("sandwich_zeta_{}", zeta.as_f64()),
        exit_fraction: bundle.exit_fraction(),
        interior_mean: None,
        warning,
    })
}

/// Normalized occupation histogram of one state coordinate over the save
/// times at or after `burn_in`, excluding exited paths. The density
/// normalizes by all counted samples, so mass outside [lo, hi] shows up as
/// a deficit.
pub fn occupation_histogram<T: Scalar>(
    bundle: &PathBundle<T>,
    axis: usize,
    lo: f64,
    hi: f64,
    bins: usize,
    burn_in: T,
) -> Result<Vec<f64>> {
    if bins == 0 || !hi.is_finite() || !lo.is_finite() || hi <= lo {
        return Err(HjbError::invalid(
            "histogram needs bins >= 1 and finite hi > lo",
        ));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut total = 0usize;
    for (states, &exited) in bundle.states.iter().zip(&bundle.exited) {
        if exited {
            continue;
        }
        for (j, &st) in bundle.save_times.iter().enumerate() {
            if st < burn_in {
                continue;
            }
            let x = &states[j];
            if axis >= x.len() {
                return Err(HjbError::invalid(format!(
                    "histogram axis {axis} out of range for state dimension {}",
                    x.len()
                )));
            }
            let v = x[axis].as_f64();
            total += 1;
            if v >= lo && v < hi {
                let b = ((v - lo) / width) as usize;
                counts[b.min(bins - 1)] += 1;
            }
        }
    }
    if total == 0 {
        return Err(HjbError::EmptyEstimate {
            details: "no samples past the burn-in time".to_string(),
        });
    }
    Ok(counts
        .iter()
        .map(|&c| c as f64 / (total as f64 * width))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrixdom::{ell_inv_symmetric, SpdPoint};
    use crate::pdesolve::{run_cauchy, rd_anchor, DiscreteOperator, ErgodicMethod, StepOptions};
    use approx::assert_relative_eq;
    use hjb_testkit::exact_flows::{cir_mean, matrix_mean_diag_k};
    use hjb_testkit::riccati::{integrate, LqParams, RiccatiState};
    use std::sync::OnceLock;

    fn lq_field() -> CoefficientField<f64> {
        CoefficientField::lq(1, 1.0, 1.0, 1.0, 1.5, 0.0).unwrap()
    }

    fn grad_vhat(x: &[f64], out: &mut [f64]) {
        out[0] = -x[0];
    }

    /// Field whose ergodic profile is identically zero: B = −x, V = 0 give
    /// 𝔉[0] = 0, so v̂ ≡ 0 and λ̂ = 0 exactly — in exact arithmetic and in
    /// floating point alike.
    fn zero_profile_field() -> CoefficientField<f64> {
        CoefficientField::new(
            1,
            |_x: &[f64]| DMatrix::identity(1, 1),
            |_x: &[f64]| DMatrix::identity(1, 1),
            |x: &[f64]| DVector::from_element(1, -x[0]),
            |_x: &[f64]| 0.0,
        )
    }

    fn zero_profile_pair(lo: f64, hi: f64, n: usize) -> ErgodicPair<f64> {
        let grid = Arc::new(Grid::regular(&[lo], &[hi], &[n]).unwrap());
        let anchor = rd_anchor(&grid).unwrap();
        ErgodicPair {
            vhat: vec![0.0; n],
            grid,
            lambda_hat: 0.0,
            anchor,
            method: ErgodicMethod::Normalization,
            residual: 0.0,
        }
    }

    /// Stationary slices v(τ,·) = v̂ + λ̂τ for the exact pair.
    fn stationary_slices(pair: &ErgodicPair<f64>, times: &[f64]) -> Vec<SolutionField<f64>> {
        times
            .iter()
            .map(|&tau| SolutionField {
                grid: pair.grid.clone(),
                t: tau,
                values: pair
                    .vhat
                    .iter()
                    .map(|&v| v + pair.lambda_hat * tau)
                    .collect(),
                dt: 0.0,
                steps: 0,
                scheme: crate::pdesolve::SchemeTag::Explicit,
            })
            .collect()
    }

    /// Shared OU bundle under the v̂ tilt (drift −2x, unit diffusion):
    /// 4000 paths to T = 10 saving yearly from t = 2.
    fn ou_bundle() -> &'static PathBundle<f64> {
        static BUNDLE: OnceLock<PathBundle<f64>> = OnceLock::new();
        BUNDLE.get_or_init(|| {
            let field = lq_field();
            let saves: Vec<f64> = (2..=10).map(|k| k as f64).collect();
            let cfg = SimConfig::new(4000, 0.02, 10.0, 411)
                .unwrap()
                .with_save_times(saves)
                .unwrap();
            let drift = TiltedDrift::new(&field, GradientSource::Analytic(&grad_vhat))
                .unwrap()
                .with_cached_diffusion_at(&[0.0])
                .unwrap();
            simulate_tilted(&drift, &[0.0], &cfg).unwrap()
        })
    }

    #[test]
    fn paths_stay_put_without_noise_or_drift() {
        let field = CoefficientField::new(
            1,
            |_x: &[f64]| DMatrix::zeros(1, 1),
            |_x: &[f64]| DMatrix::zeros(1, 1),
            |_x: &[f64]| DVector::zeros(1),
            |_x: &[f64]| 0.0,
        );
        let zero_grad = |_x: &[f64], out: &mut [f64]| out[0] = 0.0;
        let drift = TiltedDrift::new(&field, GradientSource::Analytic(&zero_grad)).unwrap();
        let cfg = SimConfig::new(50, 0.05, 1.0, 7)
            .unwrap()
            .with_save_times(vec![0.5, 1.0])
            .unwrap();
        let bundle = simulate_tilted(&drift, &[0.7], &cfg).unwrap();
        assert_eq!(bundle.n_paths(), 50);
        assert_eq!(bundle.exit_fraction(), 0.0);
        assert_eq!(bundle.clip_fraction(), 0.0);
        for states in &bundle.states {
            for s in states {
                assert_eq!(s[0], 0.7);
            }
        }
    }

    #[test]
    fn ou_stationary_variance_matches_the_tilted_dynamics() {
        // B + Ā∇v̂ = −2x with a = 1: OU with rate 2, stationary variance 1/4
        let bundle = ou_bundle();
        let last = bundle.save_times.len() - 1;
        let xs: Vec<f64> = bundle.states.iter().map(|s| s[last][0]).collect();
        let (mean, sd) = mean_and_sd(&xs);
        let n = xs.len() as f64;
        assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "mean {mean:.4}");
        let var = sd * sd;
        // SE of the sample variance via the fourth moment
        let m4: f64 = xs.iter().map(|&x| (x - mean).powi(4)).sum::<f64>() / n;
        let se_var = ((m4 - var * var) / n).sqrt();
        assert!(
            (var - 0.25).abs() <= 3.0 * se_var,
            "variance {var:.5} vs 1/4, se {se_var:.2e}"
        );
    }

    #[test]
    fn occupation_histogram_matches_the_ou_invariant_density() {
        let bundle = ou_bundle();
        let bins = 40;
        let (lo, hi) = (-2.0, 2.0);
        let dens = occupation_histogram(bundle, 0, lo, hi, bins, 2.0).unwrap();
        let width = (hi - lo) / bins as f64;
        let mut l1 = 0.0f64;
        for (b, &d) in dens.iter().enumerate() {
            let c = lo + (b as f64 + 0.5) * width;
            let pdf = (-c * c / (2.0 * 0.25)).exp() / (2.0 * std::f64::consts::PI * 0.25).sqrt();
            l1 += (d - pdf).abs() * width;
        }
        assert!(l1 <= 0.05, "L1 distance to N(0, 1/4): {l1:.4}");
    }

    #[test]
    fn antithetic_paths_mirror_the_noise_exactly() {
        let field = lq_field();
        let drift = TiltedDrift::new(&field, GradientSource::Analytic(&grad_vhat)).unwrap();
        let cfg = SimConfig::new(16, 0.05, 1.0, 99)
            .unwrap()
            .with_antithetic(true);
        let bundle = simulate_tilted(&drift, &[0.0], &cfg).unwrap();
        // odd dynamics from x0 = 0: the antithetic partner is the exact
        // mirror path, bitwise
        for pair in bundle.states.chunks(2) {
            assert_eq!(pair[0][0][0], -pair[1][0][0]);
        }
        // and the pair-averaged mean estimator is exactly 0
        let mean: f64 = bundle.states.iter().map(|s| s[0][0]).sum::<f64>();
        assert_eq!(mean, 0.0);
        // antithetic SE of the mean improves on the plain one by ≥ 1.3
        let plain = simulate_tilted(&drift, &[0.0], &cfg.clone().with_antithetic(false)).unwrap();
        let xs: Vec<f64> = plain.states.iter().map(|s| s[0][0]).collect();
        let (_, sd_plain) = mean_and_sd(&xs);
        assert!(sd_plain > 0.0);
        // antithetic sd is exactly 0 here, the strongest possible reduction
        let xa: Vec<f64> = bundle
            .states
            .chunks(2)
            .map(|p| 0.5 * (p[0][0][0] + p[1][0][0]))
            .collect();
        let (_, sd_anti) = mean_and_sd(&xa);
        assert!(sd_plain / sd_anti.max(1e-300) >= 1.3);
    }

    #[test]
    fn bundles_are_identical_across_thread_counts() {
        let field = lq_field();
        let run = |threads: usize| -> PathBundle<f64> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let drift =
                    TiltedDrift::new(&field, GradientSource::Analytic(&grad_vhat)).unwrap();
                let cfg = SimConfig::new(64, 0.05, 1.0, 2024)
                    .unwrap()
                    .with_save_times(vec![0.5, 1.0])
                    .unwrap();
                simulate_tilted(&drift, &[0.3], &cfg).unwrap()
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.seeds, b.seeds);
        for (pa, pb) in a.states.iter().zip(&b.states) {
            for (sa, sb) in pa.iter().zip(pb) {
                assert_eq!(sa[0], sb[0]);
            }
        }
    }

    #[test]
    fn tilted_drift_is_exact_at_grid_nodes() {
        // invariant: drift(x) = B(x) + Ā(x)∇φ(x) exactly at nodes, with the
        // same stencil gradient the PDE stack uses
        let field = lq_field();
        let grid = Arc::new(Grid::regular(&[-3.0], &[3.0], &[61]).unwrap());
        let vhat: Vec<f64> = (0..61)
            .map(|i| {
                let x = grid.position(i)[0];
                -x * x / 2.0
            })
            .collect();
        let mut hist = SolutionHistory::new(grid.clone());
        hist.record_values(0.0, &vhat).unwrap();
        let drift = TiltedDrift::new(&field, GradientSource::Grid(&hist)).unwrap();
        let der = crate::grid::FieldDerivatives::new(&grid, &vhat);
        for idx in [0, 1, 17, 30, 59, 60] {
            let x = grid.position(idx);
            let g = der.gradient(idx);
            let expect = field.b(&x)[0] + field.abar(&x)[(0, 0)] * g[0];
            let got = drift.drift(0.0, &x).unwrap()[0];
            assert_eq!(got, expect, "node {idx}");
        }
    }

    #[test]
    fn paths_freeze_at_the_truncation_box() {
        // pure Brownian motion on [−1, 1]: most paths exit by t = 1 and
        // must be frozen on the boundary
        let field = CoefficientField::new(
            1,
            |_x: &[f64]| DMatrix::identity(1, 1),
            |_x: &[f64]| DMatrix::zeros(1, 1),
            |_x: &[f64]| DVector::zeros(1),
            |_x: &[f64]| 0.0,
        );
        let grid = Arc::new(Grid::regular(&[-1.0], &[1.0], &[11]).unwrap());
        let mut hist = SolutionHistory::new(grid.clone());
        hist.record_values(0.0, &[0.0; 11]).unwrap();
        let drift = TiltedDrift::new(&field, GradientSource::Grid(&hist)).unwrap();
        let cfg = SimConfig::new(64, 0.01, 1.0, 5)
            .unwrap()
            .with_save_times(vec![0.5, 1.0])
            .unwrap();
        let bundle = simulate_tilted(&drift, &[0.0], &cfg).unwrap();
        let frac = bundle.exit_fraction();
        assert!(frac > 0.0 && frac < 1.0, "exit fraction {frac}");
        for (states, &exited) in bundle.states.iter().zip(&bundle.exited) {
            if exited && states[0][0].abs() == 1.0 {
                // frozen from the first save on: later saves identical
                assert_eq!(states[0][0], states[1][0]);
            }
            if exited {
                assert_eq!(states[1][0].abs(), 1.0, "frozen state on the boundary");
            }
        }
        // start point outside the box is rejected up front
        let err = simulate_tilted(&drift, &[1.5], &cfg).unwrap_err();
        assert!(matches!(err, HjbError::DomainViolation { .. }));
    }

    #[test]
    fn all_paths_exiting_is_an_empty_estimate() {
        let field = CoefficientField::new(
            1,
            |_x: &[f64]| DMatrix::identity(1, 1),
            |_x: &[f64]| DMatrix::zeros(1, 1),
            |_x: &[f64]| DVector::zeros(1),
            |_x: &[f64]| 0.0,
        );
        let grid = Arc::new(Grid::regular(&[-0.05, -0.05], &[0.05, 0.05], &[5, 5]).unwrap());
        let mut hist = SolutionHistory::new(grid.clone());
        hist.record_values(0.0, &[0.0; 25]).unwrap();
        let field2 = CoefficientField::new(
            2,
            |_x: &[f64]| DMatrix::identity(2, 2),
            |_x: &[f64]| DMatrix::zeros(2, 2),
            |_x: &[f64]| DVector::zeros(2),
            |_x: &[f64]| 0.0,
        );
        drop(field);
        let drift = TiltedDrift::new(&field2, GradientSource::Grid(&hist)).unwrap();
        let cfg = SimConfig::new(16, 0.05, 1.0, 3).unwrap();
        let err = simulate_tilted(&drift, &[0.0, 0.0], &cfg).unwrap_err();
        assert!(matches!(err, HjbError::EmptyEstimate { .. }), "{err}");
    }

    #[test]
    fn wishart_cir_mean_matches_the_exact_flow() {
        // d = 1, L = 2, Λ = 1, K = −1: dX = (4 − 2X)dt + 2√X dW
        let p = WishartParams::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, -1.0),
        )
        .unwrap();
        let x0 = SpdPoint::try_from_matrix(DMatrix::from_element(1, 1, 5.0)).unwrap();
        let cfg = SimConfig::new(1200, 4e-3, 3.0, 2718).unwrap();
        let bundle = simulate_wishart(&p, &x0, &cfg).unwrap();
        let xs: Vec<f64> = bundle.states.iter().map(|s| s[0][0]).collect();
        let (mean, sd) = mean_and_sd(&xs);
        let se = sd / (xs.len() as f64).sqrt();
        let oracle = cir_mean(4.0, 2.0, 5.0, 3.0);
        assert!(
            (mean - oracle).abs() <= 3.0 * se,
            "mean {mean:.4} vs {oracle:.4}, se {se:.4}"
        );
        assert_eq!(bundle.exit_fraction(), 0.0);
    }

    #[test]
    fn wishart_matches_the_deterministic_flow_when_lambda_vanishes() {
        let p = WishartParams::new(
            DMatrix::identity(2, 2) * 2.0,
            DMatrix::zeros(2, 2),
            -DMatrix::identity(2, 2),
        )
        .unwrap();
        let x0m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x0 = SpdPoint::try_from_matrix(x0m.clone()).unwrap();
        let cfg = SimConfig::new(1, 1e-3, 1.0, 0).unwrap();
        let bundle = simulate_wishart(&p, &x0, &cfg).unwrap();
        let state = ell_inv_symmetric(bundle.states[0][0].as_slice(), 2).unwrap();
        let ll_t = DMatrix::identity(2, 2) * 4.0;
        let oracle = matrix_mean_diag_k(&ll_t, -1.0, &x0m, 1.0);
        let err = (&state - &oracle).abs().max();
        assert!(err <= 5e-3, "deterministic flow error {err:.2e}");
        assert_eq!(bundle.clip_events, 0);
    }

    #[test]
    fn wishart_gate_true_instance_rarely_clips() {
        // L = 2I, Λ = I, K = −I stays well inside the cone
        let p = WishartParams::new(
            DMatrix::identity(2, 2) * 2.0,
            DMatrix::identity(2, 2),
            -DMatrix::identity(2, 2),
        )
        .unwrap();
        let x0 = SpdPoint::try_from_matrix(DMatrix::identity(2, 2) * 2.0).unwrap();
        let cfg = SimConfig::new(100, 1e-3, 1.0, 77)
            .unwrap()
            .with_save_times(vec![0.5, 1.0])
            .unwrap();
        let bundle = simulate_wishart(&p, &x0, &cfg).unwrap();
        assert!(
            bundle.clip_fraction() < 1e-3,
            "clip fraction {:.2e}",
            bundle.clip_fraction()
        );
        assert!(bundle.scheme_warning.is_none());
        // saved states are symmetric (flattening is well-defined) and in
        // the cone up to the clip floor
        for states in &bundle.states {
            for s in states {
                let m = ell_inv_symmetric(s.as_slice(), 2).unwrap();
                let ev = crate::linalg::symmetric_eigenvalues(&m);
                assert!(ev[0] >= -1e-12, "eigenvalue {}", ev[0]);
            }
        }
    }

    #[test]
    fn wishart_weak_order_shows_in_the_coupled_bias_ratio() {
        // small Λ keeps paths far from the cone boundary (no clip bias) and
        // shrinks the coupled-difference noise ∝ Λ⁴, so the deterministic
        // O(dt) mean bias of the Euler scheme dominates the differences
        let p = WishartParams::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 0.15),
            DMatrix::from_element(1, 1, -1.0),
        )
        .unwrap();
        let x0 = SpdPoint::try_from_matrix(DMatrix::from_element(1, 1, 4.0)).unwrap();
        let cfg = SimConfig::new(8000, 0.08, 2.0, 1234).unwrap();
        let r = wishart_bias_refinement(&p, &x0, &cfg).unwrap();
        assert!(
            r.ratio >= 1.7 && r.ratio <= 2.3,
            "bias ratio {:.3} (coarse {:.2e} ± {:.1e}, fine {:.2e} ± {:.1e})",
            r.ratio,
            r.diff_coarse.mean,
            r.diff_coarse.std_error,
            r.diff_fine.mean,
            r.diff_fine.std_error
        );
    }

    #[test]
    fn wishart_rejects_a_mismatched_start() {
        let p = WishartParams::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            -DMatrix::identity(2, 2),
        )
        .unwrap();
        let x0 = SpdPoint::try_from_matrix(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let cfg = SimConfig::new(1, 0.01, 1.0, 0).unwrap();
        assert!(simulate_wishart(&p, &x0, &cfg).is_err());
    }

    #[test]
    fn functionals_vanish_when_started_from_the_ergodic_profile() {
        // stationary slices make h ≡ 0 exactly: paths move under the tilt
        // yet every functional evaluates to exactly zero
        let field = zero_profile_field();
        let pair = zero_profile_pair(-4.0, 4.0, 81);
        let times: Vec<f64> = (0..=4).map(|j| 7.0 + 0.25 * j as f64).collect();
        let slices = stationary_slices(&pair, &times);
        let cfg = SimConfig::new(200, 0.01, 1.0, 42).unwrap();
        let (f_est, supdev) =
            mc_convergence_functionals(&field, &slices, &pair, 1.0, 8.0, &[0.5], &cfg).unwrap();
        assert_eq!(f_est.mean, 0.0);
        assert_eq!(supdev.mean, 0.0);
        let check = mc_identity_check(&field, &slices, &pair, 1.0, 8.0, &[0.5], &cfg).unwrap();
        assert_eq!(check.lhs.mean, 0.0);
        assert_eq!(check.rhs, 0.0);
        assert_eq!(check.z_score, 0.0);
        let bsde = bsde_residuals(&field, &slices, &pair, 1.0, 8.0, &[0.5], &cfg).unwrap();
        assert_eq!(bsde.z_energy.mean, 0.0);
        assert_eq!(bsde.y_supdev.mean, 0.0);
        assert_eq!(bsde.route_gap, 0.0);
        // the paths really do move: terminal states are spread out
        let paths = prepare_functional_paths(&field, &slices, &pair, 1.0, 8.0, &[0.5], &cfg)
            .unwrap();
        let last = paths.save_times.len() - 1;
        let xs: Vec<f64> = paths.bundle.states.iter().map(|s| s[last][0]).collect();
        let (_, sd) = mean_and_sd(&xs);
        assert!(sd > 0.3, "terminal spread {sd:.3}");
    }

    /// Exact discrete ergodic pair of the reference instance: quadratic
    /// fields propagate exactly through the stencils, so v̂ = −x²/2 and
    /// λ̂ = −1/2 satisfy the discrete ergodic equation to round-off.
    fn lq_discrete_pair(lo: f64, hi: f64, n: usize) -> ErgodicPair<f64> {
        let grid = Arc::new(Grid::regular(&[lo], &[hi], &[n]).unwrap());
        let vhat: Vec<f64> = (0..n)
            .map(|i| {
                let x = grid.position(i)[0];
                -x * x / 2.0
            })
            .collect();
        let anchor = rd_anchor(&grid).unwrap();
        let shift = vhat[anchor];
        ErgodicPair {
            vhat: vhat.iter().map(|v| v - shift).collect(),
            grid,
            lambda_hat: -0.5,
            anchor,
            method: ErgodicMethod::Normalization,
            residual: 0.0,
        }
    }

    fn lq_transient_slices() -> &'static (Vec<SolutionField<f64>>, ErgodicPair<f64>) {
        static DATA: OnceLock<(Vec<SolutionField<f64>>, ErgodicPair<f64>)> = OnceLock::new();
        DATA.get_or_init(|| {
            let field = lq_field();
            let grid = Arc::new(Grid::regular(&[-6.0], &[6.0], &[241]).unwrap());
            let op = DiscreteOperator::new(grid.clone(), field).unwrap();
            let v0 = vec![0.0; grid.node_count()];
            let times: Vec<f64> = (0..=20).map(|j| 1.0 + 0.05 * j as f64).collect();
            let slices = run_cauchy(&op, &v0, &times, &StepOptions::default()).unwrap();
            (slices, lq_discrete_pair(-6.0, 6.0, 241))
        })
    }

    #[test]
    fn identity_zscore_stays_small_on_the_transient_instance() {
        // v from v₀ = 0 is still relaxing on [1, 2]: h is nontrivial and the
        // quadrature functional must match h(T,x₀) − Ê[h(T−t,X_t)]
        let (slices, pair) = lq_transient_slices();
        let field = lq_field();
        let cfg = SimConfig::new(4000, 5e-3, 1.0, 314).unwrap();
        let check = mc_identity_check(&field, slices, pair, 1.0, 2.0, &[1.0], &cfg).unwrap();
        assert!(
            check.z_score <= 3.0,
            "z = {:.2} (lhs {:.3e}, rhs {:.3e}, diff se {:.2e})",
            check.z_score,
            check.lhs.mean,
            check.rhs,
            check.diff.std_error
        );
        // and the h-deviation functionals are visibly nonzero here
        let (f_est, supdev) =
            mc_convergence_functionals(&field, slices, pair, 1.0, 2.0, &[1.0], &cfg).unwrap();
        assert!(f_est.mean > 0.0);
        assert!(supdev.mean > 1e-3, "supdev {:.3e}", supdev.mean);
        // exponential lower bound holds within 3 SE
        let bound =
            mc_exponential_bound(&field, slices, pair, 1.0, 2.0, &[1.0], 1.0, &cfg).unwrap();
        assert!(bound.satisfied, "slack {:.2} SE", bound.slack_in_se);
        // BSDE routes agree and the energy is positive
        let bsde = bsde_residuals(&field, slices, pair, 1.0, 2.0, &[1.0], &cfg).unwrap();
        assert!(bsde.z_energy.mean > 0.0);
        assert!(bsde.route_gap <= 1e-10 * (1.0 + bsde.z_energy.mean));
    }

    #[test]
    fn history_gaps_are_rejected() {
        let field = zero_profile_field();
        let pair = zero_profile_pair(-4.0, 4.0, 81);
        let cfg = SimConfig::new(10, 0.01, 1.0, 1).unwrap();
        // endpoints only: the interior gap exceeds t/2
        let slices = stationary_slices(&pair, &[7.0, 8.0]);
        let err = mc_convergence_functionals(&field, &slices, &pair, 1.0, 8.0, &[0.0], &cfg)
            .unwrap_err();
        assert!(matches!(err, HjbError::MissingSlice { .. }), "{err}");
        // missing endpoint
        let slices = stationary_slices(&pair, &[7.0, 7.25, 7.5]);
        let err = mc_convergence_functionals(&field, &slices, &pair, 1.0, 8.0, &[0.0], &cfg)
            .unwrap_err();
        assert!(matches!(err, HjbError::MissingSlice { .. }), "{err}");
    }

    #[test]
    fn sandwich_collapses_in_the_linearizable_case() {
        // κ̲ = κ̄ = 1: ψ(1, 0; 1) equals the Cauchy value v(1, 0), known
        // from the Riccati oracle
        let field = lq_field();
        let phi_val = |x: &[f64]| -x[0] * x[0] / 2.0;
        let phi_grad = |x: &[f64], out: &mut [f64]| out[0] = -x[0];
        let phi_hess = |_x: &[f64]| DMatrix::from_element(1, 1, -1.0);
        let phi0 = AnalyticTilt {
            value: &phi_val,
            gradient: &phi_grad,
            hessian: &phi_hess,
        };
        let v0 = |_x: &[f64]| 0.0;
        let cfg = SimConfig::new(4000, 5e-3, 1.0, 2025).unwrap();
        let psi = mc_sandwich(&field, &phi0, &v0, 1.0, 1.0, &[0.0], &cfg).unwrap();
        let p = LqParams {
            a0: 1.0,
            kappa: 1.0,
            beta: 1.0,
            gamma: 1.5,
            v0: 0.0,
        };
        let oracle = integrate(&p, RiccatiState { a: 0.0, b: 0.0 }, 1.0, 1e-5).b;
        assert!(
            (psi.mean - oracle).abs() <= 3.0 * psi.std_error,
            "psi {:.4} vs v(1,0) {:.4}, se {:.4}",
            psi.mean,
            oracle,
            psi.std_error
        );
        assert!(psi.warning.is_none());
        // ζ-monotonicity of the log-mean-exp functional
        let psi2 = mc_sandwich(&field, &phi0, &v0, 2.0, 1.0, &[0.0], &cfg).unwrap();
        assert!(
            psi2.mean >= psi.mean - 3.0 * (psi.std_error + psi2.std_error),
            "psi(2) = {:.4} < psi(1) = {:.4}",
            psi2.mean,
            psi.mean
        );
    }

    #[test]
    fn sandwich_warns_when_the_effective_sample_collapses() {
        let field = lq_field();
        let phi_val = |x: &[f64]| -x[0] * x[0] / 2.0;
        let phi_grad = |x: &[f64], out: &mut [f64]| out[0] = -x[0];
        let phi_hess = |_x: &[f64]| DMatrix::from_element(1, 1, -1.0);
        let phi0 = AnalyticTilt {
            value: &phi_val,
            gradient: &phi_grad,
            hessian: &phi_hess,
        };
        let v0 = |_x: &[f64]| 0.0;
        let cfg = SimConfig::new(50, 0.01, 1.0, 5).unwrap();
        let psi = mc_sandwich(&field, &phi0, &v0, 40.0, 1.0, &[0.0], &cfg).unwrap();
        assert!(psi.warning.is_some());
        assert!(psi.n_effective < 100.0);
    }

    #[test]
    fn estimates_require_samples_and_reject_non_finite_ones() {
        assert!(matches!(
            estimate_from_samples(&[], &[], "x").unwrap_err(),
            HjbError::EmptyEstimate { .. }
        ));
        assert!(estimate_from_samples(&[1.0, f64::NAN], &[false, false], "x").is_err());
        let est = estimate_from_samples(&[1.0, 2.0, 3.0, 4.0], &[false; 4], "x").unwrap();
        assert_relative_eq!(est.mean, 2.5, epsilon = 1e-15);
        let sd = (5.0f64 / 3.0).sqrt();
        assert_relative_eq!(est.std_error, sd / 2.0, epsilon = 1e-15);
        assert_eq!(est.n_effective, 4.0);
        assert!(est.interior_mean.is_none());
        // interior mean excludes frozen paths
        let est =
            estimate_from_samples(&[1.0, 2.0, 30.0], &[false, false, true], "x").unwrap();
        assert_relative_eq!(est.interior_mean.unwrap(), 1.5, epsilon = 1e-15);
        assert_relative_eq!(est.exit_fraction, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn config_validation_catches_bad_inputs() {
        assert!(SimConfig::<f64>::new(0, 0.01, 1.0, 0).is_err());
        assert!(SimConfig::<f64>::new(1, 0.0, 1.0, 0).is_err());
        assert!(SimConfig::<f64>::new(1, 0.01, 0.0, 0).is_err());
        let cfg = SimConfig::<f64>::new(1, 0.01, 1.0, 0).unwrap();
        assert!(cfg.clone().with_save_times(vec![]).is_err());
        assert!(cfg.clone().with_save_times(vec![0.5, 0.5]).is_err());
        assert!(cfg.clone().with_save_times(vec![0.5, 2.0]).is_err());
        assert!(cfg.clone().with_eps_psd(-1.0).is_err());
        assert!(cfg.with_save_times(vec![0.5, 1.0]).is_ok());
    }

    #[test]
    fn pairwise_sum_agrees_with_naive_summation() {
        let v: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.01).collect();
        let naive: f64 = v.iter().sum();
        assert_relative_eq!(pairwise_sum(&v), naive, epsilon = 1e-9);
    }
}
