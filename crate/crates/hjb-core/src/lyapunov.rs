//! Growth-assumption checkers and constructive Lyapunov synthesis.
//!
//! On `R^d` the candidates are `phi0 = (c/2)|x|^2` and `psi0 = -(ct/2)|x|^2`,
//! and the synthesis revolves around the quadratic
//!
//! ```text
//! q(c) = (kappa_hi alpha1 / 2) c^2 - beta1 c - gamma1,
//! ```
//!
//! which must satisfy `q(c) <= -eps0` on an open interval of `c > 0`. On the
//! SPD cone the candidates are `phi0 = -c_lo log det x + c_hi |x| eta(|x|) + C`
//! and `psi0 = k_lo log det x - k_hi |x| eta(|x|)`, governed by
//!
//! ```text
//! gamma1 + beta1 c_hi - 4 kappa_hi alpha1 c_hi^2 >= eps0
//! ```
//!
//! together with the boundary functional `H_delta`.
//!
//! Limit-type conditions (`F[phi0] -> -infty` at the boundary, etc.) are
//! certified on nested probe shells by monotone-trend checks; every verdict
//! of this module is explicitly "certified on probes", not a proof.

use crate::coeffs::CoefficientField;
use crate::error::{HjbError, Result};
use crate::functions::Quadratic;
use crate::matrixdom::{
    h_delta, matrix_operator_eval, MatrixCoefficients, MatrixLyapunovFn, SpdPoint,
};
use crate::scalar::Scalar;
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Default divergence margin: the last shell must beat the first by this
/// factor in magnitude.
pub const DEFAULT_DIVERGENCE_MARGIN: f64 = 10.0;

/// Maximum number of doublings when searching for the anti-Lyapunov norm
/// weight `k_hi`.
pub const K_HI_DOUBLING_CAP: u32 = 20;

/// Growth-condition case of the drift/potential pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum GrowthCase {
    /// `beta1 > 0` and `gamma1 >= 0`: no additional conditions.
    BothPositive,
    /// `beta1 > 0`, `gamma1 < 0`: needs the discriminant gate (case iv-b).
    MeanReversionOnly,
    /// `beta1 <= 0`, `gamma1 > 0`: needs directional ellipticity data
    /// (case iv-a).
    PotentialOnly,
    /// `max(beta1, gamma1) <= 0`: outside the treatable regime.
    Infeasible,
}

fn positive_finite(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

/// Classifies `(beta1, gamma1)` into the growth case.
pub fn classify_growth_case(beta1: f64, gamma1: f64) -> GrowthCase {
    if beta1 > 0.0 && gamma1 >= 0.0 {
        GrowthCase::BothPositive
    } else if beta1 > 0.0 {
        GrowthCase::MeanReversionOnly
    } else if gamma1 > 0.0 {
        GrowthCase::PotentialOnly
    } else {
        GrowthCase::Infeasible
    }
}

/// Growth constants of the vector-domain assumptions:
/// `x'A(x)x <= alpha1 (1 + |x|^2)`, `B(x)'x <= -beta1 |x|^2 + C1`,
/// `-gamma2 |x|^2 - C2 <= V(x) <= -gamma1 |x|^2 + C2`, plus the
/// comparability bounds `kappa_lo A <= Abar <= kappa_hi A`.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct RdGrowthParams {
    /// Diffusion growth constant `alpha1 > 0`.
    pub alpha1: f64,
    /// Mean-reversion constant `beta1`.
    pub beta1: f64,
    /// Potential decay constant `gamma1` (upper bound side).
    pub gamma1: f64,
    /// Potential growth constant `gamma2` (lower bound side).
    pub gamma2: f64,
    /// Drift inequality offset `C1 >= 0`.
    pub c1: f64,
    /// Potential inequality offset `C2 >= 0`.
    pub c2: f64,
    /// Directional ellipticity constant `alpha2 > 0`
    /// (`x'A(x)x >= alpha2 |x|^2 - C3`), required in the potential-only case.
    pub alpha2: Option<f64>,
    /// Offset `C3` paired with `alpha2`.
    pub c3: Option<f64>,
    /// Lower comparability bound `kappa_lo > 0`.
    pub kappa_lo: f64,
    /// Upper comparability bound `kappa_hi >= kappa_lo`.
    pub kappa_hi: f64,
}

impl RdGrowthParams {
    /// Validates the invariants `alpha1 > 0`, `C1, C2 >= 0`,
    /// `alpha2 > 0` when present, and `0 < kappa_lo <= kappa_hi`.
    pub fn validate(&self) -> Result<()> {
        if !positive_finite(self.alpha1) {
            return Err(HjbError::invalid("alpha1 must be positive"));
        }
        if self.c1 < 0.0 || self.c2 < 0.0 {
            return Err(HjbError::invalid("C1 and C2 must be nonnegative"));
        }
        if let Some(a2) = self.alpha2 {
            if !positive_finite(a2) {
                return Err(HjbError::invalid("alpha2 must be positive when supplied"));
            }
        }
        if !positive_finite(self.kappa_lo) || self.kappa_hi < self.kappa_lo {
            return Err(HjbError::invalid(
                "comparability bounds need 0 < kappa_lo <= kappa_hi",
            ));
        }
        Ok(())
    }
}

/// Outcome of the growth-case classification and its gating inequality.
#[derive(Clone, Debug, serde::Serialize)]
pub struct CaseReport {
    /// Classified case.
    pub case: GrowthCase,
    /// Whether the case's gating inequality holds.
    pub pass: bool,
    /// Value of the gating expression, when the case has one
    /// (mean-reversion-only: `beta1^2 + 2 gamma1 kappa_hi alpha1`).
    pub gate_value: Option<f64>,
    /// Human-readable explanation.
    pub detail: String,
}

/// Classifies the vector-domain growth case and evaluates its gate.
pub fn check_rd_case(params: &RdGrowthParams) -> Result<CaseReport> {
    params.validate()?;
    let case = classify_growth_case(params.beta1, params.gamma1);
    Ok(match case {
        GrowthCase::BothPositive => CaseReport {
            case,
            pass: true,
            gate_value: None,
            detail: "beta1 > 0 and gamma1 >= 0: no additional conditions needed".to_string(),
        },
        GrowthCase::MeanReversionOnly => {
            let gate = params.beta1 * params.beta1
                + 2.0 * params.gamma1 * params.kappa_hi * params.alpha1;
            CaseReport {
                case,
                pass: gate > 0.0,
                gate_value: Some(gate),
                detail: format!("requires beta1^2 + 2 gamma1 kappa_hi alpha1 > 0; value {gate}"),
            }
        }
        GrowthCase::PotentialOnly => {
            let mut missing = Vec::new();
            if params.alpha2.is_none() {
                missing.push("alpha2");
            }
            if params.c3.is_none() {
                missing.push("C3");
            }
            if !missing.is_empty() {
                return Err(HjbError::IncompleteParameters {
                    case: "potential-only (directional ellipticity)".to_string(),
                    missing: missing.join(", "),
                });
            }
            CaseReport {
                case,
                pass: true,
                gate_value: params.alpha2,
                detail: "beta1 <= 0, gamma1 > 0: directional ellipticity data supplied"
                    .to_string(),
            }
        }
        GrowthCase::Infeasible => CaseReport {
            case,
            pass: false,
            gate_value: None,
            detail: "max(beta1, gamma1) <= 0: outside the treatable regime".to_string(),
        },
    })
}

/// Synthesized vector-domain Lyapunov data: `phi0 = (c/2)|x|^2`,
/// `psi0 = -(c_tilde/2)|x|^2`, together with `delta`, `alpha`, and the
/// certified slack `eps0`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RdSynthesis {
    /// Whether the synthesis succeeded.
    pub feasible: bool,
    /// Growth case that was synthesized.
    pub case: GrowthCase,
    /// Certified slack `eps0 > 0` with `q(c) <= -eps0` on the interval.
    pub eps0: f64,
    /// Open interval of admissible `c` (intersected with `c > 0`).
    pub c_interval: Option<(f64, f64)>,
    /// Chosen quadratic weight `c`.
    pub c: f64,
    /// Anti-Lyapunov weight `c_tilde`.
    pub c_tilde: f64,
    /// Strong-condition factor `delta > 1` with `delta c` in the interval.
    pub delta: f64,
    /// Coupling constant `alpha` with `alpha (delta c + c_tilde) / 2 < eps0`.
    pub alpha: f64,
    /// Re-checked value `q(c)`.
    pub q_at_c: f64,
    /// Re-checked value `q(delta c)`.
    pub q_at_delta_c: f64,
    /// Diagnostics accumulated during synthesis.
    pub messages: Vec<String>,
}

impl RdSynthesis {
    fn infeasible(case: GrowthCase, messages: Vec<String>) -> Self {
        RdSynthesis {
            feasible: false,
            case,
            eps0: 0.0,
            c_interval: None,
            c: 0.0,
            c_tilde: 0.0,
            delta: 0.0,
            alpha: 0.0,
            q_at_c: 0.0,
            q_at_delta_c: 0.0,
            messages,
        }
    }

    /// The Lyapunov candidate `phi0 = (c/2)|x|^2`.
    pub fn phi0_fn<T: Scalar>(&self, dim: usize) -> Quadratic<T> {
        Quadratic::isotropic(dim, T::lit(self.c))
    }

    /// The strong candidate `delta phi0 = (delta c / 2)|x|^2`.
    pub fn delta_phi0_fn<T: Scalar>(&self, dim: usize) -> Quadratic<T> {
        Quadratic::isotropic(dim, T::lit(self.delta * self.c))
    }

    /// The anti-Lyapunov candidate `psi0 = -(c_tilde/2)|x|^2`.
    pub fn psi0_fn<T: Scalar>(&self, dim: usize) -> Quadratic<T> {
        Quadratic::isotropic(dim, T::lit(-self.c_tilde))
    }
}

/// The synthesis quadratic `q(c) = (kappa_hi alpha1 / 2) c^2 - beta1 c - gamma1`.
pub fn rd_synthesis_quadratic(params: &RdGrowthParams, c: f64) -> f64 {
    0.5 * params.kappa_hi * params.alpha1 * c * c - params.beta1 * c - params.gamma1
}

/// Synthesizes the vector-domain Lyapunov parameters. The slack is fixed as
/// `eps0 = (1/2) sup_{c > 0} (-q(c))`, giving the widest safe interval.
pub fn synth_rd_lyapunov(params: &RdGrowthParams) -> Result<RdSynthesis> {
    let case_report = check_rd_case(params)?;
    let case = case_report.case;
    if !case_report.pass {
        return Ok(RdSynthesis::infeasible(
            case,
            vec![format!("case gate failed: {}", case_report.detail)],
        ));
    }
    let ka = params.kappa_hi * params.alpha1;
    // sup over c > 0 of -q(c); attained at the vertex when beta1 > 0,
    // approached as c -> 0+ otherwise
    let sup_neg_q = if params.beta1 > 0.0 {
        params.gamma1 + params.beta1 * params.beta1 / (2.0 * ka)
    } else {
        params.gamma1
    };
    if sup_neg_q <= 0.0 {
        return Ok(RdSynthesis::infeasible(
            case,
            vec![format!(
                "sup(-q) = {sup_neg_q} <= 0: no c > 0 makes q(c) negative"
            )],
        ));
    }
    let eps0 = 0.5 * sup_neg_q;
    // roots of q(c) + eps0 = 0
    let disc = params.beta1 * params.beta1 + 2.0 * ka * (params.gamma1 - eps0);
    if disc <= 0.0 {
        return Ok(RdSynthesis::infeasible(
            case,
            vec![format!("interval discriminant {disc} <= 0 at eps0 = {eps0}")],
        ));
    }
    let sqrt_disc = disc.sqrt();
    let c_hi = (params.beta1 + sqrt_disc) / ka;
    let c_lo = ((params.beta1 - sqrt_disc) / ka).max(0.0);
    if c_hi <= c_lo {
        return Ok(RdSynthesis::infeasible(
            case,
            vec![format!("empty positive interval ({c_lo}, {c_hi})")],
        ));
    }
    // chosen c: the vertex when it exists, the interval midpoint otherwise
    let c = if params.beta1 > 0.0 {
        params.beta1 / ka
    } else {
        0.5 * (c_lo + c_hi)
    };
    let delta = (0.5 * (1.0 + c_hi / c)).min(1.5);
    // anti-Lyapunov weight c_tilde
    let c_tilde = if params.beta1 > 0.0 {
        // c_tilde beta1 > gamma2
        (2.0 * params.gamma2.max(0.0) + 1.0) / params.beta1
    } else {
        // (kappa_lo alpha2 / 2) c_tilde^2 + beta1 c_tilde - gamma2 > 0,
        // solved with slack 1 at the larger root
        let a2 = params
            .alpha2
            .expect("potential-only case validated by check_rd_case");
        let half_ka2 = 0.5 * params.kappa_lo * a2;
        let target = params.gamma2 + 1.0;
        (-params.beta1 + (params.beta1 * params.beta1 + 4.0 * half_ka2 * target).sqrt())
            / (2.0 * half_ka2)
    };
    let alpha = eps0 / (delta * c + c_tilde);

    // re-verification by direct substitution
    let q_at_c = rd_synthesis_quadratic(params, c);
    let q_at_delta_c = rd_synthesis_quadratic(params, delta * c);
    let tol = 1e-12 * (1.0 + eps0.abs());
    let mut messages = vec![format!(
        "q(c) = {q_at_c} <= -eps0 = {}; q(delta c) = {q_at_delta_c} <= -eps0/2 = {}",
        -eps0,
        -0.5 * eps0
    )];
    let mut ok = delta > 1.0 && c > c_lo && c < c_hi;
    ok &= q_at_c <= -eps0 + tol;
    ok &= q_at_delta_c <= -0.5 * eps0 + tol;
    let c_tilde_gate = if params.beta1 > 0.0 {
        c_tilde * params.beta1 - params.gamma2
    } else {
        0.5 * params.kappa_lo * params.alpha2.unwrap() * c_tilde * c_tilde
            + params.beta1 * c_tilde
            - params.gamma2
    };
    ok &= c_tilde_gate > 0.0;
    // factor-2 slack on the coupling inequality
    ok &= alpha * (delta * c + c_tilde) <= eps0 + tol;
    messages.push(format!(
        "anti-Lyapunov gate value {c_tilde_gate}; alpha (delta c + c_tilde) = {} vs eps0 = {eps0}",
        alpha * (delta * c + c_tilde)
    ));
    if !ok {
        messages.push("re-verification failed".to_string());
        return Err(HjbError::InternalConsistency {
            details: messages.join("; "),
        });
    }
    Ok(RdSynthesis {
        feasible: true,
        case,
        eps0,
        c_interval: Some((c_lo, c_hi)),
        c,
        c_tilde,
        delta,
        alpha,
        q_at_c,
        q_at_delta_c,
        messages,
    })
}

/// Growth constants of the matrix-domain assumptions (valid for
/// `|x| >= n0`): `Tr(f)Tr(g) <= alpha1 |x|`, `Tr(B'x) <= -beta1 |x|^2 + C1`,
/// `-gamma2 |x| - C2 <= V <= -gamma1 |x| + C2`, plus the boundary constants
/// `(eps, c0, c1)` of the `H_eps` conditions and the comparability bounds.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct MatrixGrowthParams {
    /// Shell radius `n0 > 0` beyond which the growth inequalities hold.
    pub n0: f64,
    /// Noise growth constant `alpha1 > 0`.
    pub alpha1: f64,
    /// Mean-reversion constant `beta1`.
    pub beta1: f64,
    /// Potential decay constant `gamma1`.
    pub gamma1: f64,
    /// Potential growth constant `gamma2`.
    pub gamma2: f64,
    /// Drift inequality offset `C1 >= 0`.
    pub c_drift: f64,
    /// Potential inequality offset `C2 >= 0`.
    pub c_potential: f64,
    /// Directional noise constant `alpha3` (`Tr(f x g x) >= alpha3 |x|^3 - C3`),
    /// required in the potential-only case.
    pub alpha3: Option<f64>,
    /// Offset `C3` paired with `alpha3`.
    pub c3: Option<f64>,
    /// Boundary slack `eps > 0` of the `H_eps` conditions.
    pub eps: f64,
    /// Log-det coupling `c0 > 0`.
    pub c0: f64,
    /// Potential coupling `c1 > 0`.
    pub c1: f64,
    /// Lower comparability bound `kappa_lo > 0`.
    pub kappa_lo: f64,
    /// Upper comparability bound `kappa_hi >= kappa_lo`.
    pub kappa_hi: f64,
}

impl MatrixGrowthParams {
    /// Validates `n0, alpha1, eps, c0, c1 > 0` and the comparability bounds.
    pub fn validate(&self) -> Result<()> {
        if !positive_finite(self.n0) {
            return Err(HjbError::invalid("n0 must be positive"));
        }
        if !positive_finite(self.alpha1) {
            return Err(HjbError::invalid("alpha1 must be positive"));
        }
        if !(positive_finite(self.eps) && positive_finite(self.c0) && positive_finite(self.c1)) {
            return Err(HjbError::invalid("eps, c0, c1 must be positive"));
        }
        if self.c_drift < 0.0 || self.c_potential < 0.0 {
            return Err(HjbError::invalid("C1 and C2 must be nonnegative"));
        }
        if !positive_finite(self.kappa_lo) || self.kappa_hi < self.kappa_lo {
            return Err(HjbError::invalid(
                "comparability bounds need 0 < kappa_lo <= kappa_hi",
            ));
        }
        Ok(())
    }
}

/// Direction of a boundary trend check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum TrendDirection {
    /// Values must increase without bound along the shells.
    DivergeUp,
    /// Values must decrease without bound along the shells.
    DivergeDown,
    /// Values must not trend downward (liminf-type condition).
    BoundedBelow,
}

/// Result of a shell trend check.
#[derive(Clone, Debug, serde::Serialize)]
pub struct TrendReport {
    /// Direction that was checked.
    pub direction: TrendDirection,
    /// Per-shell aggregate (max for diverge-down, min otherwise), outermost
    /// last.
    pub shell_values: Vec<f64>,
    /// Monotonicity from the second shell onward.
    pub monotone: bool,
    /// Whether the last shell clears the divergence margin.
    pub margin_ok: bool,
    /// Overall verdict.
    pub pass: bool,
    /// Human-readable explanation.
    pub detail: String,
}

/// Evaluates a functional over nested probe shells and checks the divergence
/// (or boundedness) trend: monotone beyond the first shell and, for
/// divergence, last-shell magnitude at least `margin` times the first.
pub fn verify_lyapunov_divergence<P, T: Scalar>(
    eval: &mut dyn FnMut(&P) -> Result<T>,
    shells: &[Vec<P>],
    direction: TrendDirection,
    margin: f64,
) -> Result<TrendReport> {
    if shells.len() < 3 {
        return Err(HjbError::InsufficientShells {
            needed: 3,
            got: shells.len(),
        });
    }
    let mut shell_values = Vec::with_capacity(shells.len());
    for (k, shell) in shells.iter().enumerate() {
        if shell.is_empty() {
            return Err(HjbError::ProbeCoverage {
                details: format!("shell {k} is empty"),
            });
        }
        let mut agg: Option<f64> = None;
        for p in shell {
            let v = eval(p)?.as_f64();
            agg = Some(match (agg, direction) {
                (None, _) => v,
                (Some(a), TrendDirection::DivergeDown) => a.max(v),
                (Some(a), _) => a.min(v),
            });
        }
        shell_values.push(agg.unwrap());
    }
    let first = shell_values[0];
    let last = *shell_values.last().unwrap();
    let monotone = shell_values
        .windows(2)
        .skip(1)
        .all(|w| match direction {
            TrendDirection::DivergeDown => w[1] < w[0],
            TrendDirection::DivergeUp => w[1] > w[0],
            TrendDirection::BoundedBelow => w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()),
        });
    let margin_ok = match direction {
        TrendDirection::DivergeDown => last < 0.0 && -last >= margin * first.abs(),
        TrendDirection::DivergeUp => last > 0.0 && last >= margin * first.abs(),
        TrendDirection::BoundedBelow => last >= first,
    };
    let pass = monotone && margin_ok;
    Ok(TrendReport {
        direction,
        shell_values,
        monotone,
        margin_ok,
        pass,
        detail: format!(
            "first shell {first}, last shell {last}, margin factor {margin} (certified on probes)"
        ),
    })
}

/// Uniformly sampled points on the sphere `|x| = r` (signs of the axis for
/// `dim = 1`).
fn sphere_points<T: Scalar>(
    dim: usize,
    r: f64,
    count: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<Vec<T>> {
    if dim == 1 {
        return vec![vec![T::lit(r)], vec![T::lit(-r)]];
    }
    (0..count)
        .map(|_| {
            loop {
                let g: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
                let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-3 {
                    return g.iter().map(|v| T::lit(v / n * r)).collect();
                }
            }
        })
        .collect()
}

/// Nested spherical probe shells at the given radii.
pub fn rd_sphere_shells<T: Scalar>(
    dim: usize,
    radii: &[f64],
    per_shell: usize,
    seed: u64,
) -> Vec<Vec<Vec<T>>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    radii
        .iter()
        .map(|&r| sphere_points(dim, r, per_shell, &mut rng))
        .collect()
}

fn random_orthogonal(d: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    if d == 1 {
        return DMatrix::identity(1, 1);
    }
    let g = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0f64));
    g.qr().q()
}

fn spd_from_spectrum<T: Scalar>(eigs: &[f64], rng: &mut ChaCha12Rng) -> SpdPoint<T> {
    let d = eigs.len();
    let q = random_orthogonal(d, rng);
    let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(eigs));
    let m = &q * lam * q.transpose();
    let mt = DMatrix::from_fn(d, d, |i, j| T::lit(0.5 * (m[(i, j)] + m[(j, i)])));
    SpdPoint::try_from_matrix(mt).expect("constructed spectrum is positive definite")
}

/// Probe shells on the SPD cone: norm shells marching to infinity and
/// small-determinant shells marching to the cone boundary.
pub struct MatrixProbeSet<T: Scalar> {
    /// Shells of increasing Frobenius norm.
    pub norm_shells: Vec<Vec<SpdPoint<T>>>,
    /// Shells of decreasing smallest eigenvalue (norm kept moderate).
    pub det_shells: Vec<Vec<SpdPoint<T>>>,
}

impl<T: Scalar> MatrixProbeSet<T> {
    /// Generates the default probe set for `d x d` matrices: four norm
    /// shells at radii `(n0 + 2) * 2^k` and four determinant shells with
    /// smallest eigenvalue `10^{-1-k}`.
    pub fn generate(d: usize, n0: f64, seed: u64) -> Self {
        let radii: Vec<f64> = (0..4).map(|k| (n0 + 2.0) * f64::powi(2.0, k)).collect();
        let lambda_mins: Vec<f64> = (0..4).map(|k| f64::powi(10.0, -1 - k)).collect();
        MatrixProbeSet {
            norm_shells: spd_norm_shells(d, &radii, 16, seed),
            det_shells: spd_det_shells(d, &lambda_mins, 16, seed.wrapping_add(1)),
        }
    }

    /// Validates shell counts for trend checks.
    pub fn validate(&self) -> Result<()> {
        if self.norm_shells.len() < 3 {
            return Err(HjbError::ProbeCoverage {
                details: format!(
                    "need at least 3 norm shells, got {}",
                    self.norm_shells.len()
                ),
            });
        }
        if self.det_shells.len() < 3 {
            return Err(HjbError::ProbeCoverage {
                details: format!(
                    "need at least 3 determinant shells, got {}",
                    self.det_shells.len()
                ),
            });
        }
        Ok(())
    }

    /// All probes across both shell families.
    pub fn all_points(&self) -> impl Iterator<Item = &SpdPoint<T>> {
        self.norm_shells
            .iter()
            .chain(self.det_shells.iter())
            .flatten()
    }
}

/// Random SPD shells of prescribed Frobenius norm (eigenvalues bounded away
/// from zero relative to the radius).
pub fn spd_norm_shells<T: Scalar>(
    d: usize,
    radii: &[f64],
    per_shell: usize,
    seed: u64,
) -> Vec<Vec<SpdPoint<T>>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    radii
        .iter()
        .map(|&r| {
            (0..per_shell)
                .map(|_| {
                    let eigs: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..1.0)).collect();
                    let scale = r / eigs.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let scaled: Vec<f64> = eigs.iter().map(|v| v * scale).collect();
                    spd_from_spectrum(&scaled, &mut rng)
                })
                .collect()
        })
        .collect()
}

/// Random SPD shells of prescribed smallest eigenvalue with the remaining
/// spectrum of order one (determinant marching to zero, norm bounded).
pub fn spd_det_shells<T: Scalar>(
    d: usize,
    lambda_mins: &[f64],
    per_shell: usize,
    seed: u64,
) -> Vec<Vec<SpdPoint<T>>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    lambda_mins
        .iter()
        .map(|&lm| {
            (0..per_shell)
                .map(|_| {
                    let mut eigs: Vec<f64> =
                        (0..d.saturating_sub(1)).map(|_| rng.gen_range(0.5..1.5)).collect();
                    eigs.push(lm);
                    spd_from_spectrum(&eigs, &mut rng)
                })
                .collect()
        })
        .collect()
}

/// Worst-case slacks of the matrix growth inequalities on the probes, plus
/// the boundary trend verdicts.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MatrixAssumptionReport {
    /// Growth case of `(beta1, gamma1)`.
    pub case: GrowthCase,
    /// Whether the case gate holds.
    pub case_pass: bool,
    /// Case gate detail.
    pub case_detail: String,
    /// `min alpha1 |x| - Tr(f)Tr(g)` over probes with `|x| >= n0`.
    pub alpha1_slack: f64,
    /// `min (-beta1 |x|^2 + C1) - Tr(B'x)` over probes with `|x| >= n0`.
    pub beta1_slack: f64,
    /// `min (-gamma1 |x| + C2) - V` over probes with `|x| >= n0`.
    pub v_upper_slack: f64,
    /// `min V - (-gamma2 |x| - C2)` over probes with `|x| >= n0`.
    pub v_lower_slack: f64,
    /// `max V` over probes with `|x| <= n0` (must be finite).
    pub v_small_norm_max: f64,
    /// Empirical infimum of `Tr(f x g x) / |x|^3` over large-norm probes
    /// (potential-only case; reported without claiming a proof).
    pub alpha3_empirical: Option<f64>,
    /// Minimum of `H_eps` over all probes.
    pub h_eps_min: f64,
    /// Trend of `H_eps + c0 log det x` along the determinant shells.
    pub h_eps_logdet_trend: TrendReport,
    /// Trend of `H_0 + c1 V` along the determinant shells.
    pub h0_v_trend: TrendReport,
    /// Overall verdict (certified on probes).
    pub pass: bool,
}

/// Evaluates the matrix growth and boundary assumptions on the probe set.
pub fn check_matrix_assumptions<T: Scalar>(
    mc: &MatrixCoefficients<T>,
    params: &MatrixGrowthParams,
    probes: &MatrixProbeSet<T>,
) -> Result<MatrixAssumptionReport> {
    params.validate()?;
    probes.validate()?;

    let case = classify_growth_case(params.beta1, params.gamma1);
    let (case_pass, case_detail) = match case {
        GrowthCase::BothPositive => (
            true,
            "beta1 > 0 and gamma1 >= 0: no additional conditions needed".to_string(),
        ),
        GrowthCase::MeanReversionOnly => {
            let gate = params.beta1 * params.beta1
                + 16.0 * params.kappa_hi * params.alpha1 * params.gamma1;
            (
                gate > 0.0,
                format!("requires beta1^2 + 16 kappa_hi alpha1 gamma1 > 0; value {gate}"),
            )
        }
        GrowthCase::PotentialOnly => (
            true,
            "beta1 <= 0, gamma1 > 0: directional noise bound estimated on probes".to_string(),
        ),
        GrowthCase::Infeasible => (
            false,
            "max(beta1, gamma1) <= 0: outside the treatable regime".to_string(),
        ),
    };

    let mut alpha1_slack = f64::INFINITY;
    let mut beta1_slack = f64::INFINITY;
    let mut v_upper_slack = f64::INFINITY;
    let mut v_lower_slack = f64::INFINITY;
    let mut v_small_norm_max = f64::NEG_INFINITY;
    let mut alpha3_inf = f64::INFINITY;
    let mut h_eps_min = f64::INFINITY;
    let mut saw_large_norm = false;

    for x in probes.all_points() {
        let xm = x.matrix();
        let r = x.norm().as_f64();
        let f = mc.f(xm);
        let g = mc.g(xm);
        let b = mc.b(xm);
        let v = mc.v(xm).as_f64();
        h_eps_min = h_eps_min.min(h_delta(mc, T::lit(params.eps), x).as_f64());
        if r >= params.n0 {
            saw_large_norm = true;
            let tfg = (f.trace() * g.trace()).as_f64();
            alpha1_slack = alpha1_slack.min(params.alpha1 * r - tfg);
            let drift = (b.transpose() * xm).trace().as_f64();
            beta1_slack = beta1_slack.min(-params.beta1 * r * r + params.c_drift - drift);
            v_upper_slack = v_upper_slack.min(-params.gamma1 * r + params.c_potential - v);
            v_lower_slack = v_lower_slack.min(v + params.gamma2 * r + params.c_potential);
            let fxgx = (&f * xm * &g * xm).trace().as_f64();
            alpha3_inf = alpha3_inf.min(fxgx / (r * r * r));
        } else {
            v_small_norm_max = v_small_norm_max.max(v);
        }
    }
    if !saw_large_norm {
        return Err(HjbError::ProbeCoverage {
            details: format!("no probe has norm >= n0 = {}", params.n0),
        });
    }

    let alpha3_empirical = if case == GrowthCase::PotentialOnly {
        Some(alpha3_inf)
    } else {
        None
    };
    let alpha3_pass = match (case, params.alpha3) {
        (GrowthCase::PotentialOnly, Some(a3)) => alpha3_inf >= a3,
        (GrowthCase::PotentialOnly, None) => alpha3_inf > 0.0,
        _ => true,
    };

    let eps_t = T::lit(params.eps);
    let c0 = params.c0;
    let c1 = params.c1;
    let h_eps_logdet_trend = verify_lyapunov_divergence(
        &mut |x: &SpdPoint<T>| {
            Ok(h_delta(mc, eps_t, x) + T::lit(c0) * x.log_det())
        },
        &probes.det_shells,
        TrendDirection::BoundedBelow,
        DEFAULT_DIVERGENCE_MARGIN,
    )?;
    let h0_v_trend = verify_lyapunov_divergence(
        &mut |x: &SpdPoint<T>| {
            Ok(h_delta(mc, T::zero(), x) + T::lit(c1) * mc.v(x.matrix()))
        },
        &probes.det_shells,
        TrendDirection::DivergeUp,
        DEFAULT_DIVERGENCE_MARGIN,
    )?;

    let slacks_ok = alpha1_slack >= 0.0
        && beta1_slack >= 0.0
        && v_upper_slack >= 0.0
        && v_lower_slack >= 0.0
        && v_small_norm_max < f64::INFINITY;
    let pass = case_pass
        && slacks_ok
        && alpha3_pass
        && h_eps_logdet_trend.pass
        && h0_v_trend.pass
        && h_eps_min > f64::NEG_INFINITY;

    Ok(MatrixAssumptionReport {
        case,
        case_pass,
        case_detail,
        alpha1_slack,
        beta1_slack,
        v_upper_slack,
        v_lower_slack,
        v_small_norm_max,
        alpha3_empirical,
        h_eps_min,
        h_eps_logdet_trend,
        h0_v_trend,
        pass,
    })
}

/// Synthesized matrix-domain Lyapunov data.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MatrixSynthesis {
    /// Whether the synthesis succeeded.
    pub feasible: bool,
    /// Certified slack `eps0` of the norm-coefficient inequality.
    pub eps0: f64,
    /// Log-det weight `c_lo = min(eps/(4 kappa_hi), eps/(8 kappa_lo)) / 2`.
    pub c_lo: f64,
    /// Open interval of admissible norm weights.
    pub c_interval: Option<(f64, f64)>,
    /// Chosen norm weight `c_hi`.
    pub c_hi: f64,
    /// Nonnegativity offset `C` of `phi0` (synthesized on probes).
    pub offset: f64,
    /// Strong-condition factor `delta > 1`.
    pub delta: f64,
    /// Anti-Lyapunov log-det weight `k_lo = 2 / c1`.
    pub k_lo: f64,
    /// Anti-Lyapunov norm weight `k_hi` found by the doubling search.
    pub k_hi: f64,
    /// Coupling constant `alpha` (factor-2 slack on both inequalities).
    pub alpha: f64,
    /// Lower-boundedness constant `K` for `psi0 + K phi0`.
    pub cap_k: f64,
    /// Shell radius carried from the growth parameters.
    pub n0: f64,
    /// Trend report for `F[phi0]` on the norm shells.
    pub phi0_norm_trend: Option<TrendReport>,
    /// Trend report for `F[phi0]` on the determinant shells.
    pub phi0_det_trend: Option<TrendReport>,
    /// Trend report for `F[delta phi0]` on the norm shells.
    pub delta_phi0_norm_trend: Option<TrendReport>,
    /// Trend report for `F[psi0]` on the norm shells.
    pub psi0_norm_trend: Option<TrendReport>,
    /// Trend report for `F[psi0]` on the determinant shells.
    pub psi0_det_trend: Option<TrendReport>,
    /// Diagnostics accumulated during synthesis.
    pub messages: Vec<String>,
}

impl MatrixSynthesis {
    fn infeasible(messages: Vec<String>) -> Self {
        MatrixSynthesis {
            feasible: false,
            eps0: 0.0,
            c_lo: 0.0,
            c_interval: None,
            c_hi: 0.0,
            offset: 0.0,
            delta: 0.0,
            k_lo: 0.0,
            k_hi: 0.0,
            alpha: 0.0,
            cap_k: 0.0,
            n0: 0.0,
            phi0_norm_trend: None,
            phi0_det_trend: None,
            delta_phi0_norm_trend: None,
            psi0_norm_trend: None,
            psi0_det_trend: None,
            messages,
        }
    }

    /// The Lyapunov candidate
    /// `phi0 = -c_lo log det x + c_hi |x| eta(|x|) + C`.
    pub fn phi0_fn<T: Scalar>(&self, d: usize) -> MatrixLyapunovFn<T> {
        MatrixLyapunovFn {
            d,
            w_logdet: T::lit(-self.c_lo),
            w_norm: T::lit(self.c_hi),
            n0: T::lit(self.n0),
            offset: T::lit(self.offset),
        }
    }

    /// The strong candidate `delta phi0`.
    pub fn delta_phi0_fn<T: Scalar>(&self, d: usize) -> MatrixLyapunovFn<T> {
        MatrixLyapunovFn {
            d,
            w_logdet: T::lit(-self.delta * self.c_lo),
            w_norm: T::lit(self.delta * self.c_hi),
            n0: T::lit(self.n0),
            offset: T::lit(self.delta * self.offset),
        }
    }

    /// The anti-Lyapunov candidate `psi0 = k_lo log det x - k_hi |x| eta(|x|)`.
    pub fn psi0_fn<T: Scalar>(&self, d: usize) -> MatrixLyapunovFn<T> {
        MatrixLyapunovFn {
            d,
            w_logdet: T::lit(self.k_lo),
            w_norm: T::lit(-self.k_hi),
            n0: T::lit(self.n0),
            offset: T::zero(),
        }
    }
}

fn matrix_f_eval<T: Scalar>(
    mc: &MatrixCoefficients<T>,
    lyap: &MatrixLyapunovFn<T>,
    x: &SpdPoint<T>,
) -> Result<T> {
    Ok(matrix_operator_eval(mc, lyap, x)?.total())
}

/// Synthesizes the matrix-domain Lyapunov parameters and re-verifies all
/// divergence trends by direct operator evaluation on the probe shells.
pub fn synth_matrix_lyapunov<T: Scalar>(
    mc: &MatrixCoefficients<T>,
    params: &MatrixGrowthParams,
    probes: &MatrixProbeSet<T>,
) -> Result<MatrixSynthesis> {
    let report = check_matrix_assumptions(mc, params, probes)?;
    if !report.pass {
        return Ok(MatrixSynthesis::infeasible(vec![format!(
            "assumption check failed: case {:?} ({}), H-eps/log-det trend pass = {}, H0 + c1 V trend pass = {}",
            report.case,
            report.case_detail,
            report.h_eps_logdet_trend.pass,
            report.h0_v_trend.pass
        )]));
    }
    let mut messages = Vec::new();
    let ka4 = 4.0 * params.kappa_hi * params.alpha1;
    // sup over c > 0 of gamma1 + beta1 c - 4 kappa_hi alpha1 c^2
    let sup = if params.beta1 > 0.0 {
        params.gamma1 + params.beta1 * params.beta1 / (4.0 * ka4)
    } else {
        params.gamma1
    };
    if sup <= 0.0 {
        return Ok(MatrixSynthesis::infeasible(vec![format!(
            "sup of the norm-coefficient quadratic is {sup} <= 0"
        )]));
    }
    let eps0 = 0.5 * sup;
    // roots of -4 kappa_hi alpha1 c^2 + beta1 c + gamma1 - eps0 = 0
    let disc = params.beta1 * params.beta1 + 4.0 * ka4 * (params.gamma1 - eps0);
    if disc <= 0.0 {
        return Ok(MatrixSynthesis::infeasible(vec![format!(
            "norm-weight interval discriminant {disc} <= 0 at eps0 = {eps0}"
        )]));
    }
    let sqrt_disc = disc.sqrt();
    let c_bar_hi = (params.beta1 + sqrt_disc) / (2.0 * ka4);
    let c_bar_lo = ((params.beta1 - sqrt_disc) / (2.0 * ka4)).max(0.0);
    if c_bar_hi <= c_bar_lo {
        return Ok(MatrixSynthesis::infeasible(vec![format!(
            "empty positive norm-weight interval ({c_bar_lo}, {c_bar_hi})"
        )]));
    }
    let c_hi = if params.beta1 > 0.0 {
        params.beta1 / (2.0 * ka4)
    } else {
        0.5 * (c_bar_lo + c_bar_hi)
    };
    let c_lo = 0.5
        * (params.eps / (4.0 * params.kappa_hi)).min(params.eps / (8.0 * params.kappa_lo));
    messages.push(format!(
        "c_lo = min(eps/(4 kappa_hi), eps/(8 kappa_lo))/2 = {c_lo} (both well-posedness thresholds honored)"
    ));
    let delta = (0.5 * (1.0 + c_bar_hi / c_hi)).min(1.5);
    let k_lo = 2.0 / params.c1;

    let d = mc.d();
    // nonnegativity offset for phi0, synthesized on probes
    let mut min_core = f64::INFINITY;
    for x in probes.all_points() {
        let r = x.norm().as_f64();
        let (e, _, _) = crate::functions::cutoff::eta(r, params.n0 + 1.0);
        min_core = min_core.min(-c_lo * x.log_det().as_f64() + c_hi * r * e);
    }
    let offset = (-min_core).max(0.0) + 1.0;

    // doubling search for k_hi: both psi0 trends must pass
    let k_start = if params.beta1 > 0.0 {
        (2.0 * params.gamma2.max(0.0) + 1.0) / params.beta1
    } else {
        1.0
    };
    let mut k_hi = k_start;
    let mut found = false;
    let mut psi0_norm_trend = None;
    let mut psi0_det_trend = None;
    for attempt in 0..=K_HI_DOUBLING_CAP {
        let psi0 = MatrixLyapunovFn::<T> {
            d,
            w_logdet: T::lit(k_lo),
            w_norm: T::lit(-k_hi),
            n0: T::lit(params.n0),
            offset: T::zero(),
        };
        let nt = verify_lyapunov_divergence(
            &mut |x: &SpdPoint<T>| matrix_f_eval(mc, &psi0, x),
            &probes.norm_shells,
            TrendDirection::DivergeUp,
            DEFAULT_DIVERGENCE_MARGIN,
        )?;
        let dt = verify_lyapunov_divergence(
            &mut |x: &SpdPoint<T>| matrix_f_eval(mc, &psi0, x),
            &probes.det_shells,
            TrendDirection::DivergeUp,
            DEFAULT_DIVERGENCE_MARGIN,
        )?;
        if nt.pass && dt.pass {
            found = true;
            psi0_norm_trend = Some(nt);
            psi0_det_trend = Some(dt);
            break;
        }
        if attempt == K_HI_DOUBLING_CAP {
            psi0_norm_trend = Some(nt);
            psi0_det_trend = Some(dt);
        }
        k_hi *= 2.0;
    }
    if !found {
        let mut out = MatrixSynthesis::infeasible(vec![format!(
            "inconclusive: no k_hi in [{k_start}, {k_hi}] passes the psi0 divergence trend within {K_HI_DOUBLING_CAP} doublings"
        )]);
        out.psi0_norm_trend = psi0_norm_trend;
        out.psi0_det_trend = psi0_det_trend;
        return Ok(out);
    }

    // coupling constant with factor-2 slack on both inequalities
    let alpha = 0.5
        * (eps0 / (delta * c_hi + k_hi)).min(params.c0 / (1.0 + k_lo / (delta * c_lo)));
    let cap_k = k_lo / c_lo + k_hi / c_hi + 1.0;

    let synthesis = MatrixSynthesis {
        feasible: true,
        eps0,
        c_lo,
        c_interval: Some((c_bar_lo, c_bar_hi)),
        c_hi,
        offset,
        delta,
        k_lo,
        k_hi,
        alpha,
        cap_k,
        n0: params.n0,
        phi0_norm_trend: None,
        phi0_det_trend: None,
        delta_phi0_norm_trend: None,
        psi0_norm_trend,
        psi0_det_trend,
        messages,
    };

    // re-verify phi0 and delta phi0 divergence by direct evaluation
    let phi0 = synthesis.phi0_fn::<T>(d);
    let phi0_norm_trend = verify_lyapunov_divergence(
        &mut |x: &SpdPoint<T>| matrix_f_eval(mc, &phi0, x),
        &probes.norm_shells,
        TrendDirection::DivergeDown,
        DEFAULT_DIVERGENCE_MARGIN,
    )?;
    let phi0_det_trend = verify_lyapunov_divergence(
        &mut |x: &SpdPoint<T>| matrix_f_eval(mc, &phi0, x),
        &probes.det_shells,
        TrendDirection::DivergeDown,
        DEFAULT_DIVERGENCE_MARGIN,
    )?;
    let dphi0 = synthesis.delta_phi0_fn::<T>(d);
    let delta_phi0_norm_trend = verify_lyapunov_divergence(
        &mut |x: &SpdPoint<T>| matrix_f_eval(mc, &dphi0, x),
        &probes.norm_shells,
        TrendDirection::DivergeDown,
        DEFAULT_DIVERGENCE_MARGIN,
    )?;
    let all_pass =
        phi0_norm_trend.pass && phi0_det_trend.pass && delta_phi0_norm_trend.pass;
    let mut out = MatrixSynthesis {
        phi0_norm_trend: Some(phi0_norm_trend),
        phi0_det_trend: Some(phi0_det_trend),
        delta_phi0_norm_trend: Some(delta_phi0_norm_trend),
        ..synthesis
    };
    if !all_pass {
        out.feasible = false;
        out.messages
            .push("re-verification of phi0 / delta phi0 divergence failed on probes".to_string());
    } else {
        out.messages.push(format!(
            "all divergence trends verified on probes; alpha = {alpha}, K = {cap_k}"
        ));
    }
    Ok(out)
}

/// Re-verifies a vector-domain synthesis by evaluating the operator on the
/// probe shells: `F[phi0]` and `F[delta phi0]` must diverge down, `F[psi0]`
/// up. Returns the three trend reports in that order.
pub fn verify_rd_synthesis<T: Scalar>(
    field: &CoefficientField<T>,
    synthesis: &RdSynthesis,
    shells: &[Vec<Vec<T>>],
) -> Result<[TrendReport; 3]> {
    let dim = field.dim();
    let phi0 = synthesis.phi0_fn::<T>(dim);
    let dphi0 = synthesis.delta_phi0_fn::<T>(dim);
    let psi0 = synthesis.psi0_fn::<T>(dim);
    let down = verify_lyapunov_divergence(
        &mut |x: &Vec<T>| field.eval_operator(&phi0, x),
        shells,
        TrendDirection::DivergeDown,
        DEFAULT_DIVERGENCE_MARGIN,
    )?;
    let down_delta = verify_lyapunov_divergence(
        &mut |x: &Vec<T>| field.eval_operator(&dphi0, x),
        shells,
        TrendDirection::DivergeDown,
        DEFAULT_DIVERGENCE_MARGIN,
    )?;
    let up = verify_lyapunov_divergence(
        &mut |x: &Vec<T>| field.eval_operator(&psi0, x),
        shells,
        TrendDirection::DivergeUp,
        DEFAULT_DIVERGENCE_MARGIN,
    )?;
    Ok([down, down_delta, up])
}
