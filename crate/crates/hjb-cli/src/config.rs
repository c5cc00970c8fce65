//! Experiment configuration: a flat, line-oriented `key = value` text under
//! `[section]` headers, with full-line `#` comments. Vectors are
//! whitespace-separated numbers; matrices are row-major with rows separated
//! by `;`. Validation materializes every default, rejects unknown sections
//! and keys, and reports all problems at once with `section.key` field
//! paths.
//!
//! Sections: `[run]` (pipeline tag, output directory), `[model]` (family tag
//! and parameters), `[grid]`, `[solver]`, `[simulation]`, `[lyapunov]`
//! (growth constants; omitted values are derived from the model), and the
//! stage blocks `[convergence]` and `[sandwich]`. The matrix-cone `wishart`
//! family accepts only `[run]`, `[model]`, `[lyapunov]`, and `[simulation]`.

use hjb_core::linalg;
use hjb_core::lyapunov::{MatrixGrowthParams, RdGrowthParams};
use nalgebra::DMatrix;
use std::collections::BTreeMap;

/// Named pipeline selecting which stages run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Pipeline {
    /// Ellipticity/growth checks and Lyapunov synthesis only.
    CheckAssumptions,
    /// Checks plus the ergodic pair (v̂, λ̂).
    SolveErgodic,
    /// Checks plus the Cauchy solution v(t, ·).
    SolveCauchy,
    /// Checks, ergodic pair, Cauchy run, and the h-flattening report.
    ConvergePde,
    /// Checks, ergodic pair, Cauchy run, and the Monte Carlo functionals.
    ConvergeMc,
    /// Checks, ergodic pair, Cauchy run, and the exponential sandwich.
    Sandwich,
    /// Checks plus path simulation with summary statistics.
    Simulate,
    /// Every verdict-bearing stage for the model family.
    FullBattery,
}

impl Pipeline {
    /// The kebab-case tag used in configs and on the command line.
    pub fn tag(self) -> &'static str {
        match self {
            Pipeline::CheckAssumptions => "check-assumptions",
            Pipeline::SolveErgodic => "solve-ergodic",
            Pipeline::SolveCauchy => "solve-cauchy",
            Pipeline::ConvergePde => "converge-pde",
            Pipeline::ConvergeMc => "converge-mc",
            Pipeline::Sandwich => "sandwich",
            Pipeline::Simulate => "simulate",
            Pipeline::FullBattery => "full-battery",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        [
            Pipeline::CheckAssumptions,
            Pipeline::SolveErgodic,
            Pipeline::SolveCauchy,
            Pipeline::ConvergePde,
            Pipeline::ConvergeMc,
            Pipeline::Sandwich,
            Pipeline::Simulate,
            Pipeline::FullBattery,
        ]
        .into_iter()
        .find(|p| p.tag() == tag)
    }
}

/// Wishart-family potential choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WishartPotential {
    /// V ≡ 0.
    Zero,
    /// V(x) = −‖x‖_F.
    NegNorm,
}

/// Model family and parameters.
#[derive(Clone, Debug)]
pub enum ModelSpec {
    /// A = a₀I, Ā = κa₀I, B = −βx, V = −γ|x|² + v_const.
    Lq {
        dim: usize,
        a0: f64,
        kappa: f64,
        beta: f64,
        gamma: f64,
        v_const: f64,
    },
    /// Constant A, Ā; linear drift B(x) = Mx; quadratic V(x) = x′Qx + v_const.
    CustomPoly {
        a: DMatrix<f64>,
        abar: DMatrix<f64>,
        b_linear: DMatrix<f64>,
        v_quad: DMatrix<f64>,
        v_const: f64,
    },
    /// Wishart-type SPD dynamics: drift LL′ + Kx + xK′, noise factor Λ.
    Wishart {
        l: DMatrix<f64>,
        lambda: DMatrix<f64>,
        k: DMatrix<f64>,
        x0: DMatrix<f64>,
        potential: WishartPotential,
        abar_kappa: f64,
    },
}

impl ModelSpec {
    /// State dimension (matrix side length for the wishart family).
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Lq { dim, .. } => *dim,
            ModelSpec::CustomPoly { a, .. } => a.nrows(),
            ModelSpec::Wishart { l, .. } => l.nrows(),
        }
    }

    /// Whether the model lives on a vector domain (as opposed to the SPD cone).
    pub fn is_vector(&self) -> bool {
        !matches!(self, ModelSpec::Wishart { .. })
    }

    /// Family tag as written in configs.
    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::Lq { .. } => "lq",
            ModelSpec::CustomPoly { .. } => "custom-poly",
            ModelSpec::Wishart { .. } => "wishart",
        }
    }
}

/// Truncated-box grid description.
#[derive(Clone, Debug)]
pub struct GridBlock {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
}

/// Time-stepping scheme choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeChoice {
    Explicit,
    Imex,
}

/// Which ergodic extraction route(s) to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErgodicChoice {
    /// Long-time normalization, plus the eigen route when Ā = κA.
    Both,
    Normalization,
    Eigen,
}

/// PDE solver options.
#[derive(Clone, Debug)]
pub struct SolverBlock {
    pub scheme: SchemeChoice,
    pub dt: Option<f64>,
    pub cfl: f64,
    pub snapshot_times: Vec<f64>,
    pub anchor: Vec<f64>,
    pub v0_const: f64,
    pub v0_quad: f64,
    pub ergodic_method: ErgodicChoice,
    pub ergodic_tol: f64,
    pub ergodic_probe_interval: f64,
    pub ergodic_t_max: f64,
    pub ergodic_agree_tol: f64,
}

/// Monte Carlo simulation options.
#[derive(Clone, Debug)]
pub struct SimBlock {
    pub n_paths: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub antithetic: bool,
    pub eps_psd: f64,
    pub ess_floor: f64,
    pub clip_warn: f64,
    pub save_times: Vec<f64>,
    pub x0: Vec<f64>,
}

/// Convergence-stage options (PDE flattening and MC functionals).
#[derive(Clone, Debug)]
pub struct ConvergenceBlock {
    pub pde_times: Vec<f64>,
    pub tol_h: f64,
    pub tol_grad: f64,
    pub mc_t: f64,
    pub mc_horizons: Vec<f64>,
    pub slices_per_window: usize,
    pub decrease_factor: f64,
}

/// Exponential-sandwich options.
#[derive(Clone, Debug)]
pub struct SandwichBlock {
    pub t: f64,
    pub x0: Vec<f64>,
    pub zeta_lo: f64,
    pub zeta_hi: f64,
}

/// Lyapunov/growth constants, family-shaped.
#[derive(Clone, Debug)]
pub enum LyapunovBlock {
    Vector {
        params: RdGrowthParams,
        shell_radii: Vec<f64>,
        per_shell: usize,
        probe_seed: u64,
    },
    Matrix {
        params: MatrixGrowthParams,
        probe_seed: u64,
    },
}

/// A fully validated experiment configuration with all defaults
/// materialized.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    pub out: Option<String>,
    pub model: ModelSpec,
    pub grid: GridBlock,
    pub solver: SolverBlock,
    pub simulation: SimBlock,
    pub lyapunov: LyapunovBlock,
    pub convergence: ConvergenceBlock,
    pub sandwich: SandwichBlock,
}

const KNOWN_SECTIONS: [&str; 8] = [
    "run",
    "model",
    "grid",
    "solver",
    "simulation",
    "lyapunov",
    "convergence",
    "sandwich",
];

fn parse_sections(
    text: &str,
    errors: &mut Vec<String>,
) -> BTreeMap<String, BTreeMap<String, String>> {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            if name.is_empty() {
                errors.push(format!("line {}: empty section header", lineno + 1));
                continue;
            }
            sections.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!(
                "line {}: expected `key = value`, got '{line}'",
                lineno + 1
            ));
            continue;
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            errors.push(format!("line {}: empty key", lineno + 1));
            continue;
        }
        let Some(section) = &current else {
            errors.push(format!(
                "line {}: key '{key}' appears before any [section] header",
                lineno + 1
            ));
            continue;
        };
        let slot = sections.get_mut(section).expect("section registered");
        match slot.entry(key) {
            std::collections::btree_map::Entry::Occupied(e) => {
                errors.push(format!("duplicate key \"{section}.{}\"", e.key()));
            }
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(value);
            }
        }
    }
    sections
}

/// One section's raw keys with typed, default-aware extraction; leftovers
/// are reported as unknown keys.
struct Bag {
    section: &'static str,
    map: BTreeMap<String, String>,
}

impl Bag {
    fn new(
        section: &'static str,
        sections: &mut BTreeMap<String, BTreeMap<String, String>>,
    ) -> Self {
        Bag {
            section,
            map: sections.remove(section).unwrap_or_default(),
        }
    }

    fn path(&self, key: &str) -> String {
        format!("{}.{}", self.section, key)
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn opt_f64(&mut self, key: &str, errors: &mut Vec<String>) -> Option<f64> {
        let raw = self.raw(key)?;
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Some(v),
            _ => {
                errors.push(format!(
                    "{} must be a finite number, got '{raw}'",
                    self.path(key)
                ));
                None
            }
        }
    }

    fn f64(&mut self, key: &str, default: f64, errors: &mut Vec<String>) -> f64 {
        self.opt_f64(key, errors).unwrap_or(default)
    }

    fn req_f64(&mut self, key: &str, errors: &mut Vec<String>) -> f64 {
        if self.map.contains_key(key) {
            self.opt_f64(key, errors).unwrap_or(f64::NAN)
        } else {
            errors.push(format!("missing key {}", self.path(key)));
            f64::NAN
        }
    }

    fn usize(&mut self, key: &str, default: usize, errors: &mut Vec<String>) -> usize {
        match self.raw(key) {
            None => default,
            Some(raw) => match raw.parse::<usize>() {
                Ok(v) => v,
                Err(_) => {
                    errors.push(format!(
                        "{} must be a nonnegative integer, got '{raw}'",
                        self.path(key)
                    ));
                    default
                }
            },
        }
    }

    fn u64(&mut self, key: &str, default: u64, errors: &mut Vec<String>) -> u64 {
        match self.raw(key) {
            None => default,
            Some(raw) => match raw.parse::<u64>() {
                Ok(v) => v,
                Err(_) => {
                    errors.push(format!(
                        "{} must be a nonnegative integer, got '{raw}'",
                        self.path(key)
                    ));
                    default
                }
            },
        }
    }

    fn bool(&mut self, key: &str, default: bool, errors: &mut Vec<String>) -> bool {
        match self.raw(key).as_deref() {
            None => default,
            Some("true") => true,
            Some("false") => false,
            Some(raw) => {
                errors.push(format!(
                    "{} must be true or false, got '{raw}'",
                    self.path(key)
                ));
                default
            }
        }
    }

    fn str_choice(
        &mut self,
        key: &str,
        choices: &[&str],
        default: &str,
        errors: &mut Vec<String>,
    ) -> String {
        match self.raw(key) {
            None => default.to_string(),
            Some(raw) => {
                if choices.contains(&raw.as_str()) {
                    raw
                } else {
                    errors.push(format!(
                        "{} must be one of {}, got '{raw}'",
                        self.path(key),
                        choices.join("|")
                    ));
                    default.to_string()
                }
            }
        }
    }

    fn opt_vec_f64(&mut self, key: &str, errors: &mut Vec<String>) -> Option<Vec<f64>> {
        let raw = self.raw(key)?;
        let mut out = Vec::new();
        for tok in raw.split([' ', '\t', ',']).filter(|t| !t.is_empty()) {
            match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => out.push(v),
                _ => {
                    errors.push(format!(
                        "{} must be a list of finite numbers, got '{raw}'",
                        self.path(key)
                    ));
                    return None;
                }
            }
        }
        if out.is_empty() {
            errors.push(format!("{} must not be empty", self.path(key)));
            return None;
        }
        Some(out)
    }

    fn vec_f64(&mut self, key: &str, default: &[f64], errors: &mut Vec<String>) -> Vec<f64> {
        self.opt_vec_f64(key, errors)
            .unwrap_or_else(|| default.to_vec())
    }

    fn opt_vec_usize(&mut self, key: &str, errors: &mut Vec<String>) -> Option<Vec<usize>> {
        let raw = self.raw(key)?;
        let mut out = Vec::new();
        for tok in raw.split([' ', '\t', ',']).filter(|t| !t.is_empty()) {
            match tok.parse::<usize>() {
                Ok(v) => out.push(v),
                Err(_) => {
                    errors.push(format!(
                        "{} must be a list of nonnegative integers, got '{raw}'",
                        self.path(key)
                    ));
                    return None;
                }
            }
        }
        if out.is_empty() {
            errors.push(format!("{} must not be empty", self.path(key)));
            return None;
        }
        Some(out)
    }

    /// Row-major matrix: rows separated by `;`, entries by whitespace or
    /// commas.
    fn req_matrix(&mut self, key: &str, errors: &mut Vec<String>) -> Option<DMatrix<f64>> {
        let Some(raw) = self.raw(key) else {
            errors.push(format!("missing key {}", self.path(key)));
            return None;
        };
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for row in raw.split(';') {
            let mut entries = Vec::new();
            for tok in row.split([' ', '\t', ',']).filter(|t| !t.is_empty()) {
                match tok.parse::<f64>() {
                    Ok(v) if v.is_finite() => entries.push(v),
                    _ => {
                        errors.push(format!(
                            "{} must be a matrix (semicolon-separated rows of numbers), got '{raw}'",
                            self.path(key)
                        ));
                        return None;
                    }
                }
            }
            if !entries.is_empty() {
                rows.push(entries);
            }
        }
        if rows.is_empty() {
            errors.push(format!("{} must not be empty", self.path(key)));
            return None;
        }
        let ncols = rows[0].len();
        if rows.iter().any(|r| r.len() != ncols) {
            errors.push(format!(
                "{} rows must all have the same length",
                self.path(key)
            ));
            return None;
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Some(DMatrix::from_row_slice(flat.len() / ncols, ncols, &flat))
    }

    /// Reports every unconsumed key and the section's applicability.
    fn finish(self, errors: &mut Vec<String>) {
        for key in self.map.keys() {
            errors.push(format!("unknown key \"{}.{}\"", self.section, key));
        }
    }
}

fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eigs = sym_part(m).symmetric_eigenvalues();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &e in eigs.iter() {
        lo = lo.min(e);
        hi = hi.max(e);
    }
    (lo, hi)
}

fn require_square(
    m: &DMatrix<f64>,
    dim: Option<usize>,
    path: &str,
    errors: &mut Vec<String>,
) -> bool {
    if m.nrows() != m.ncols() {
        errors.push(format!(
            "{path} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        ));
        return false;
    }
    if let Some(d) = dim {
        if m.nrows() != d {
            errors.push(format!("{path} must be {d}x{d}, got {}x{}", m.nrows(), m.ncols()));
            return false;
        }
    }
    true
}

fn broadcast(
    v: Vec<f64>,
    dim: usize,
    path: &str,
    errors: &mut Vec<String>,
) -> Vec<f64> {
    if v.len() == dim {
        v
    } else if v.len() == 1 {
        vec![v[0]; dim]
    } else {
        errors.push(format!(
            "{path} must have 1 or {dim} entries, got {}",
            v.len()
        ));
        vec![v[0]; dim]
    }
}

fn check_increasing(times: &[f64], path: &str, errors: &mut Vec<String>) {
    for w in times.windows(2) {
        if w[1] <= w[0] {
            errors.push(format!("{path} must be strictly increasing"));
            return;
        }
    }
}

fn parse_model(bag: &mut Bag, errors: &mut Vec<String>) -> Option<ModelSpec> {
    let family = match bag.raw("family") {
        Some(f) => f,
        None => {
            errors.push("missing key model.family".to_string());
            return None;
        }
    };
    match family.as_str() {
        "lq" => {
            let dim = bag.usize("dim", 1, errors);
            let a0 = bag.f64("a0", 1.0, errors);
            let kappa = bag.f64("kappa", 1.0, errors);
            let beta = bag.f64("beta", 1.0, errors);
            let gamma = bag.req_f64("gamma", errors);
            let v_const = bag.f64("v_const", 0.0, errors);
            if dim == 0 {
                errors.push("model.dim must be at least 1".to_string());
                return None;
            }
            if a0 <= 0.0 {
                errors.push("model.a0 must be positive".to_string());
            }
            if kappa <= 0.0 {
                errors.push("model.kappa must be positive".to_string());
            }
            Some(ModelSpec::Lq {
                dim,
                a0,
                kappa,
                beta,
                gamma,
                v_const,
            })
        }
        "custom-poly" => {
            let a = bag.req_matrix("a", errors)?;
            let abar = bag.req_matrix("abar", errors)?;
            let b_linear = bag.req_matrix("b_linear", errors)?;
            let v_quad = bag.req_matrix("v_quad", errors)?;
            let v_const = bag.f64("v_const", 0.0, errors);
            if !require_square(&a, None, "model.a", errors) {
                return None;
            }
            let dim = a.nrows();
            let mut ok = true;
            ok &= require_square(&abar, Some(dim), "model.abar", errors);
            ok &= require_square(&b_linear, Some(dim), "model.b_linear", errors);
            ok &= require_square(&v_quad, Some(dim), "model.v_quad", errors);
            if !ok {
                return None;
            }
            Some(ModelSpec::CustomPoly {
                a,
                abar,
                b_linear,
                v_quad,
                v_const,
            })
        }
        "wishart" => {
            let l = bag.req_matrix("l", errors)?;
            let lambda = bag.req_matrix("lambda", errors)?;
            let k = bag.req_matrix("k", errors)?;
            if !require_square(&l, None, "model.l", errors) {
                return None;
            }
            let d = l.nrows();
            let x0 = if bag.has("x0") {
                bag.req_matrix("x0", errors)?
            } else {
                DMatrix::identity(d, d)
            };
            let mut ok = true;
            ok &= require_square(&lambda, Some(d), "model.lambda", errors);
            ok &= require_square(&k, Some(d), "model.k", errors);
            ok &= require_square(&x0, Some(d), "model.x0", errors);
            if !ok {
                return None;
            }
            if hjb_core::matrixdom::SpdPoint::new(x0.clone(), 1e-9).is_err() {
                errors.push("model.x0 must be symmetric positive definite".to_string());
            }
            let potential = match bag
                .str_choice("potential", &["zero", "neg-norm"], "zero", errors)
                .as_str()
            {
                "neg-norm" => WishartPotential::NegNorm,
                _ => WishartPotential::Zero,
            };
            let abar_kappa = bag.f64("abar_kappa", 0.0, errors);
            if abar_kappa < 0.0 {
                errors.push("model.abar_kappa must be nonnegative".to_string());
            }
            Some(ModelSpec::Wishart {
                l,
                lambda,
                k,
                x0,
                potential,
                abar_kappa,
            })
        }
        other => {
            errors.push(format!(
                "model.family must be one of lq|custom-poly|wishart, got '{other}'"
            ));
            None
        }
    }
}

/// Derived vector-family growth defaults: `alpha1` from the diffusion,
/// `beta1` from the symmetrized drift matrix, `gamma1`/`gamma2` from the
/// potential quadratic, and the comparability bounds from the pencil
/// (Ā, A). Explicit `[lyapunov]` keys override each one.
fn vector_lyapunov_defaults(
    model: &ModelSpec,
    errors: &mut Vec<String>,
) -> (f64, f64, f64, f64, f64, f64, f64, f64) {
    match model {
        ModelSpec::Lq {
            a0,
            kappa,
            beta,
            gamma,
            v_const,
            ..
        } => (
            *a0,
            *beta,
            *gamma,
            gamma.max(0.0),
            0.0,
            v_const.abs(),
            *kappa,
            *kappa,
        ),
        ModelSpec::CustomPoly {
            a,
            abar,
            b_linear,
            v_quad,
            v_const,
        } => {
            let (a_min, a_max) = sym_eig_range(a);
            if a_min <= 0.0 {
                errors.push("model.a must be positive definite".to_string());
            }
            let (_, m_max) = sym_eig_range(b_linear);
            let (q_min, q_max) = sym_eig_range(v_quad);
            let (kappa_lo, kappa_hi) =
                match linalg::pencil_eigenvalues(&sym_part(abar), &sym_part(a)) {
                    Ok(pencil) => {
                        let mut lo = f64::INFINITY;
                        let mut hi = f64::NEG_INFINITY;
                        for &e in &pencil {
                            lo = lo.min(e);
                            hi = hi.max(e);
                        }
                        (lo, hi)
                    }
                    Err(_) => {
                        errors.push(
                            "model.abar/model.a comparability bounds could not be derived; \
                             set lyapunov.kappa_lo and lyapunov.kappa_hi"
                                .to_string(),
                        );
                        (1.0, 1.0)
                    }
                };
            (
                a_max.max(f64::MIN_POSITIVE),
                -m_max,
                -q_max,
                (-q_min).max(0.0),
                0.0,
                v_const.abs(),
                kappa_lo,
                kappa_hi,
            )
        }
        ModelSpec::Wishart { .. } => unreachable!("vector defaults on a matrix model"),
    }
}

fn parse_vector_lyapunov(
    bag: &mut Bag,
    model: &ModelSpec,
    errors: &mut Vec<String>,
) -> LyapunovBlock {
    let (alpha1, beta1, gamma1, gamma2, c1, c2, kappa_lo, kappa_hi) =
        vector_lyapunov_defaults(model, errors);
    let params = RdGrowthParams {
        alpha1: bag.f64("alpha1", alpha1, errors),
        beta1: bag.f64("beta1", beta1, errors),
        gamma1: bag.f64("gamma1", gamma1, errors),
        gamma2: bag.f64("gamma2", gamma2, errors),
        c1: bag.f64("c1", c1, errors),
        c2: bag.f64("c2", c2, errors),
        alpha2: bag.opt_f64("alpha2", errors),
        c3: bag.opt_f64("c3", errors),
        kappa_lo: bag.f64("kappa_lo", kappa_lo, errors),
        kappa_hi: bag.f64("kappa_hi", kappa_hi, errors),
    };
    let shell_radii = bag.vec_f64("shell_radii", &[4.0, 8.0, 16.0], errors);
    if shell_radii.len() < 3 {
        errors.push("lyapunov.shell_radii needs at least 3 radii".to_string());
    }
    check_increasing(&shell_radii, "lyapunov.shell_radii", errors);
    let per_shell = bag.usize("per_shell", 12, errors);
    if per_shell == 0 {
        errors.push("lyapunov.per_shell must be at least 1".to_string());
    }
    let probe_seed = bag.u64("probe_seed", 7, errors);
    if let Err(e) = params.validate() {
        errors.push(format!("lyapunov: {e}"));
    }
    LyapunovBlock::Vector {
        params,
        shell_radii,
        per_shell,
        probe_seed,
    }
}

fn parse_matrix_lyapunov(
    bag: &mut Bag,
    model: &ModelSpec,
    errors: &mut Vec<String>,
) -> LyapunovBlock {
    let ModelSpec::Wishart {
        l,
        lambda,
        k,
        potential,
        abar_kappa,
        ..
    } = model
    else {
        unreachable!("matrix defaults on a vector model");
    };
    let d = l.nrows() as f64;
    let ll = l * l.transpose();
    let g = lambda * lambda.transpose();
    let (_, k_max) = sym_eig_range(k);
    let n0 = bag.f64("n0", 1.0, errors);
    // probe radii reach (n0 + 2) * 8; the drift offset must absorb
    // Tr(LL'x) <= |LL'|_F |x| out to the outermost norm shell
    let c_drift_default = ll.norm() * (n0 + 2.0) * 8.0 * 1.01;
    let (gamma1_d, gamma2_d, c_pot_d) = match potential {
        WishartPotential::Zero => (0.0, 0.0, 0.0),
        WishartPotential::NegNorm => (1.0, 1.0, 0.0),
    };
    let kappa_default = if *abar_kappa > 0.0 { *abar_kappa } else { 1.0 };
    let params = MatrixGrowthParams {
        n0,
        alpha1: bag.f64("alpha1", (d.sqrt() * g.trace()).max(1e-9), errors),
        beta1: bag.f64("beta1", -2.0 * k_max, errors),
        gamma1: bag.f64("gamma1", gamma1_d, errors),
        gamma2: bag.f64("gamma2", gamma2_d, errors),
        c_drift: bag.f64("c_drift", c_drift_default, errors),
        c_potential: bag.f64("c_potential", c_pot_d, errors),
        alpha3: bag.opt_f64("alpha3", errors),
        c3: bag.opt_f64("c3", errors),
        eps: bag.f64("eps", 1.0, errors),
        c0: bag.f64("c0", 1.0, errors),
        c1: bag.f64("c1", 1.0, errors),
        kappa_lo: bag.f64("kappa_lo", kappa_default, errors),
        kappa_hi: bag.f64("kappa_hi", kappa_default, errors),
    };
    let probe_seed = bag.u64("probe_seed", 7, errors);
    if let Err(e) = params.validate() {
        errors.push(format!("lyapunov: {e}"));
    }
    LyapunovBlock::Matrix { params, probe_seed }
}

/// Parses and validates a configuration text, materializing all defaults.
/// `cli_pipeline` is the pipeline given on the command line; it must agree
/// with `run.pipeline` when both are present. On failure, returns every
/// problem found, each prefixed with its `section.key` path.
pub fn validate(
    text: &str,
    cli_pipeline: Option<Pipeline>,
) -> Result<ExperimentConfig, Vec<String>> {
    let mut errors = Vec::new();
    let mut sections = parse_sections(text, &mut errors);

    for name in sections.keys() {
        if !KNOWN_SECTIONS.contains(&name.as_str()) {
            errors.push(format!("unknown section [{name}]"));
        }
    }
    sections.retain(|name, _| KNOWN_SECTIONS.contains(&name.as_str()));
    if !sections.contains_key("model") {
        errors.push("missing required section [model]".to_string());
    }

    // [run]
    let mut run = Bag::new("run", &mut sections);
    let config_pipeline = run.raw("pipeline").and_then(|tag| {
        let p = Pipeline::from_tag(&tag);
        if p.is_none() {
            errors.push(format!("run.pipeline has unrecognized tag '{tag}'"));
        }
        p
    });
    let out = run.raw("out");
    run.finish(&mut errors);
    let pipeline = match (cli_pipeline, config_pipeline) {
        (Some(a), Some(b)) if a != b => {
            errors.push(format!(
                "run.pipeline '{}' conflicts with the command-line pipeline '{}'",
                b.tag(),
                a.tag()
            ));
            Some(a)
        }
        (Some(a), _) => Some(a),
        (None, Some(b)) => Some(b),
        (None, None) => {
            errors.push(
                "missing run.pipeline (set it in [run] or pass the pipeline on the command line)"
                    .to_string(),
            );
            None
        }
    };

    // [model]
    let mut model_bag = Bag::new("model", &mut sections);
    let model = parse_model(&mut model_bag, &mut errors);
    model_bag.finish(&mut errors);
    let Some(model) = model else {
        return Err(errors);
    };
    let dim = model.dim();

    if !model.is_vector() {
        for sect in ["grid", "solver", "convergence", "sandwich"] {
            if sections.contains_key(sect) {
                errors.push(format!(
                    "section [{sect}] does not apply to model.family wishart"
                ));
                sections.remove(sect);
            }
        }
        if let Some(p) = pipeline {
            if !matches!(
                p,
                Pipeline::CheckAssumptions | Pipeline::Simulate | Pipeline::FullBattery
            ) {
                errors.push(format!(
                    "pipeline {} does not apply to model.family wishart",
                    p.tag()
                ));
            }
        }
    }

    // [grid]
    let mut grid_bag = Bag::new("grid", &mut sections);
    let lo = broadcast(
        grid_bag.vec_f64("lo", &[-6.0], &mut errors),
        dim,
        "grid.lo",
        &mut errors,
    );
    let hi = broadcast(
        grid_bag.vec_f64("hi", &[6.0], &mut errors),
        dim,
        "grid.hi",
        &mut errors,
    );
    let nodes = match grid_bag.opt_vec_usize("nodes", &mut errors) {
        Some(n) if n.len() == dim => n,
        Some(n) if n.len() == 1 => vec![n[0]; dim],
        Some(n) => {
            errors.push(format!(
                "grid.nodes must have 1 or {dim} entries, got {}",
                n.len()
            ));
            vec![n[0]; dim]
        }
        None => vec![241; dim],
    };
    for (k, &n) in nodes.iter().enumerate() {
        if n < 3 {
            errors.push(format!("grid.nodes axis {k} needs at least 3 nodes"));
        }
    }
    for k in 0..dim.min(lo.len()).min(hi.len()) {
        if hi[k] <= lo[k] {
            errors.push(format!("grid axis {k} has empty extent [{}, {}]", lo[k], hi[k]));
        }
    }
    grid_bag.finish(&mut errors);
    let grid = GridBlock { lo, hi, nodes };

    // [solver]
    let mut solver_bag = Bag::new("solver", &mut sections);
    let scheme = match solver_bag
        .str_choice("scheme", &["explicit", "imex"], "explicit", &mut errors)
        .as_str()
    {
        "imex" => SchemeChoice::Imex,
        _ => SchemeChoice::Explicit,
    };
    let dt = solver_bag.opt_f64("dt", &mut errors);
    if let Some(v) = dt {
        if v <= 0.0 {
            errors.push("solver.dt must be positive".to_string());
        }
    }
    if scheme == SchemeChoice::Imex && dt.is_none() {
        errors.push("solver.dt is required when solver.scheme = imex".to_string());
    }
    let cfl = solver_bag.f64("cfl", 0.4, &mut errors);
    if cfl <= 0.0 || cfl >= 1.0 {
        errors.push("solver.cfl must lie in (0, 1)".to_string());
    }
    let snapshot_times = solver_bag.vec_f64("snapshot_times", &[1.0], &mut errors);
    check_increasing(&snapshot_times, "solver.snapshot_times", &mut errors);
    if snapshot_times.first().copied().unwrap_or(0.0) < 0.0 {
        errors.push("solver.snapshot_times must be nonnegative".to_string());
    }
    let anchor = broadcast(
        solver_bag.vec_f64("anchor", &[0.0], &mut errors),
        dim,
        "solver.anchor",
        &mut errors,
    );
    let v0_const = solver_bag.f64("v0_const", 0.0, &mut errors);
    let v0_quad = solver_bag.f64("v0_quad", 0.0, &mut errors);
    let ergodic_method = match solver_bag
        .str_choice(
            "ergodic_method",
            &["both", "normalization", "eigen"],
            "both",
            &mut errors,
        )
        .as_str()
    {
        "normalization" => ErgodicChoice::Normalization,
        "eigen" => ErgodicChoice::Eigen,
        _ => ErgodicChoice::Both,
    };
    let ergodic_tol = solver_bag.f64("ergodic_tol", 1e-5, &mut errors);
    let ergodic_probe_interval = solver_bag.f64("ergodic_probe_interval", 0.25, &mut errors);
    let ergodic_t_max = solver_bag.f64("ergodic_t_max", 200.0, &mut errors);
    let ergodic_agree_tol = solver_bag.f64("ergodic_agree_tol", 1e-3, &mut errors);
    for (name, v) in [
        ("solver.ergodic_tol", ergodic_tol),
        ("solver.ergodic_probe_interval", ergodic_probe_interval),
        ("solver.ergodic_t_max", ergodic_t_max),
        ("solver.ergodic_agree_tol", ergodic_agree_tol),
    ] {
        if v <= 0.0 {
            errors.push(format!("{name} must be positive"));
        }
    }
    solver_bag.finish(&mut errors);
    let solver = SolverBlock {
        scheme,
        dt,
        cfl,
        snapshot_times,
        anchor,
        v0_const,
        v0_quad,
        ergodic_method,
        ergodic_tol,
        ergodic_probe_interval,
        ergodic_t_max,
        ergodic_agree_tol,
    };

    // [simulation]
    let mut sim_bag = Bag::new("simulation", &mut sections);
    let n_paths = sim_bag.usize("n_paths", 4096, &mut errors);
    if n_paths == 0 {
        errors.push("simulation.n_paths must be at least 1".to_string());
    }
    let sim_dt = sim_bag.f64("dt", 0.01, &mut errors);
    if sim_dt <= 0.0 {
        errors.push("simulation.dt must be positive".to_string());
    }
    let horizon = sim_bag.f64("horizon", 1.0, &mut errors);
    if horizon <= 0.0 {
        errors.push("simulation.horizon must be positive".to_string());
    }
    let seed = sim_bag.u64("seed", 0, &mut errors);
    let antithetic = sim_bag.bool("antithetic", false, &mut errors);
    let eps_psd = sim_bag.f64("eps_psd", 1e-12, &mut errors);
    if eps_psd <= 0.0 {
        errors.push("simulation.eps_psd must be positive".to_string());
    }
    let ess_floor = sim_bag.f64("ess_floor", 100.0, &mut errors);
    let clip_warn = sim_bag.f64("clip_warn", 1e-3, &mut errors);
    if clip_warn <= 0.0 {
        errors.push("simulation.clip_warn must be positive".to_string());
    }
    let save_times = sim_bag.vec_f64("save_times", &[horizon], &mut errors);
    check_increasing(&save_times, "simulation.save_times", &mut errors);
    if save_times.first().copied().unwrap_or(1.0) <= 0.0
        || save_times.last().copied().unwrap_or(0.0) > horizon + 1e-12
    {
        errors.push("simulation.save_times must lie in (0, horizon]".to_string());
    }
    let sim_x0 = broadcast(
        sim_bag.vec_f64("x0", &[0.0], &mut errors),
        dim,
        "simulation.x0",
        &mut errors,
    );
    sim_bag.finish(&mut errors);
    let simulation = SimBlock {
        n_paths,
        dt: sim_dt,
        horizon,
        seed,
        antithetic,
        eps_psd,
        ess_floor,
        clip_warn,
        save_times,
        x0: sim_x0,
    };

    // [lyapunov]
    let mut lyap_bag = Bag::new("lyapunov", &mut sections);
    let lyapunov = if model.is_vector() {
        parse_vector_lyapunov(&mut lyap_bag, &model, &mut errors)
    } else {
        parse_matrix_lyapunov(&mut lyap_bag, &model, &mut errors)
    };
    lyap_bag.finish(&mut errors);

    // [convergence]
    let mut conv_bag = Bag::new("convergence", &mut sections);
    let pde_times = conv_bag.vec_f64("pde_times", &[5.0, 10.0, 20.0], &mut errors);
    if pde_times.len() < 3 {
        errors.push("convergence.pde_times needs at least 3 times".to_string());
    }
    check_increasing(&pde_times, "convergence.pde_times", &mut errors);
    let tol_h = conv_bag.f64("tol_h", 1e-3, &mut errors);
    let tol_grad = conv_bag.f64("tol_grad", 1e-3, &mut errors);
    let mc_t = conv_bag.f64("mc_t", 1.0, &mut errors);
    let mc_horizons = conv_bag.vec_f64("mc_horizons", &[2.0, 4.0, 8.0, 16.0], &mut errors);
    check_increasing(&mc_horizons, "convergence.mc_horizons", &mut errors);
    let slices_per_window = conv_bag.usize("slices_per_window", 21, &mut errors);
    let decrease_factor = conv_bag.f64("decrease_factor", 10.0, &mut errors);
    for (name, v) in [
        ("convergence.tol_h", tol_h),
        ("convergence.tol_grad", tol_grad),
        ("convergence.mc_t", mc_t),
        ("convergence.decrease_factor", decrease_factor),
    ] {
        if v <= 0.0 {
            errors.push(format!("{name} must be positive"));
        }
    }
    if slices_per_window < 3 {
        errors.push("convergence.slices_per_window must be at least 3".to_string());
    }
    if mc_horizons.first().copied().unwrap_or(f64::INFINITY) < mc_t {
        errors.push("convergence.mc_horizons must all be >= convergence.mc_t".to_string());
    }
    conv_bag.finish(&mut errors);
    let convergence = ConvergenceBlock {
        pde_times,
        tol_h,
        tol_grad,
        mc_t,
        mc_horizons,
        slices_per_window,
        decrease_factor,
    };

    // [sandwich]
    let mut sand_bag = Bag::new("sandwich", &mut sections);
    let sandwich_t = sand_bag.f64("t", 1.0, &mut errors);
    if sandwich_t <= 0.0 {
        errors.push("sandwich.t must be positive".to_string());
    }
    let sandwich_x0 = broadcast(
        sand_bag.vec_f64("x0", &[0.0], &mut errors),
        dim,
        "sandwich.x0",
        &mut errors,
    );
    let (kappa_lo_eff, kappa_hi_eff) = match &lyapunov {
        LyapunovBlock::Vector { params, .. } => (params.kappa_lo, params.kappa_hi),
        LyapunovBlock::Matrix { params, .. } => (params.kappa_lo, params.kappa_hi),
    };
    let zeta_lo = sand_bag.f64("zeta_lo", kappa_lo_eff, &mut errors);
    let zeta_hi = sand_bag.f64("zeta_hi", kappa_hi_eff, &mut errors);
    if zeta_lo <= 0.0 || zeta_hi <= 0.0 {
        errors.push("sandwich.zeta_lo and sandwich.zeta_hi must be positive".to_string());
    }
    if zeta_hi < zeta_lo {
        errors.push("sandwich.zeta_hi must be >= sandwich.zeta_lo".to_string());
    }
    sand_bag.finish(&mut errors);
    let sandwich = SandwichBlock {
        t: sandwich_t,
        x0: sandwich_x0,
        zeta_lo,
        zeta_hi,
    };

    if model.is_vector() {
        for k in 0..dim {
            let inside = |x: f64| x >= grid.lo[k] - 1e-12 && x <= grid.hi[k] + 1e-12;
            if !inside(solver.anchor[k]) {
                errors.push(format!("solver.anchor lies outside grid axis {k}"));
            }
            if !inside(simulation.x0[k]) {
                errors.push(format!("simulation.x0 lies outside grid axis {k}"));
            }
            if !inside(sandwich.x0[k]) {
                errors.push(format!("sandwich.x0 lies outside grid axis {k}"));
            }
        }
    }

    let (Some(pipeline), true) = (pipeline, errors.is_empty()) else {
        return Err(errors);
    };
    Ok(ExperimentConfig {
        pipeline,
        out,
        model,
        grid,
        solver,
        simulation,
        lyapunov,
        convergence,
        sandwich,
    })
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn fmt_vec_usize(v: &[usize]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| format!("{}", m[(i, j)]))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

impl ExperimentConfig {
    /// Flat echo of the effective configuration (defaults materialized),
    /// keyed `section.key`. The output directory is deliberately excluded:
    /// it is invocation plumbing, not experiment semantics.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("run.pipeline", self.pipeline.tag().to_string());
        match &self.model {
            ModelSpec::Lq {
                dim,
                a0,
                kappa,
                beta,
                gamma,
                v_const,
            } => {
                put("model.family", "lq".to_string());
                put("model.dim", format!("{dim}"));
                put("model.a0", format!("{a0}"));
                put("model.kappa", format!("{kappa}"));
                put("model.beta", format!("{beta}"));
                put("model.gamma", format!("{gamma}"));
                put("model.v_const", format!("{v_const}"));
            }
            ModelSpec::CustomPoly {
                a,
                abar,
                b_linear,
                v_quad,
                v_const,
            } => {
                put("model.family", "custom-poly".to_string());
                put("model.a", fmt_matrix(a));
                put("model.abar", fmt_matrix(abar));
                put("model.b_linear", fmt_matrix(b_linear));
                put("model.v_quad", fmt_matrix(v_quad));
                put("model.v_const", format!("{v_const}"));
            }
            ModelSpec::Wishart {
                l,
                lambda,
                k,
                x0,
                potential,
                abar_kappa,
            } => {
                put("model.family", "wishart".to_string());
                put("model.l", fmt_matrix(l));
                put("model.lambda", fmt_matrix(lambda));
                put("model.k", fmt_matrix(k));
                put("model.x0", fmt_matrix(x0));
                put(
                    "model.potential",
                    match potential {
                        WishartPotential::Zero => "zero",
                        WishartPotential::NegNorm => "neg-norm",
                    }
                    .to_string(),
                );
                put("model.abar_kappa", format!("{abar_kappa}"));
            }
        }
        if self.model.is_vector() {
            put("grid.lo", fmt_vec(&self.grid.lo));
            put("grid.hi", fmt_vec(&self.grid.hi));
            put("grid.nodes", fmt_vec_usize(&self.grid.nodes));
            let s = &self.solver;
            put(
                "solver.scheme",
                match s.scheme {
                    SchemeChoice::Explicit => "explicit",
                    SchemeChoice::Imex => "imex",
                }
                .to_string(),
            );
            if let Some(dt) = s.dt {
                put("solver.dt", format!("{dt}"));
            }
            put("solver.cfl", format!("{}", s.cfl));
            put("solver.snapshot_times", fmt_vec(&s.snapshot_times));
            put("solver.anchor", fmt_vec(&s.anchor));
            put("solver.v0_const", format!("{}", s.v0_const));
            put("solver.v0_quad", format!("{}", s.v0_quad));
            put(
                "solver.ergodic_method",
                match s.ergodic_method {
                    ErgodicChoice::Both => "both",
                    ErgodicChoice::Normalization => "normalization",
                    ErgodicChoice::Eigen => "eigen",
                }
                .to_string(),
            );
            put("solver.ergodic_tol", format!("{}", s.ergodic_tol));
            put(
                "solver.ergodic_probe_interval",
                format!("{}", s.ergodic_probe_interval),
            );
            put("solver.ergodic_t_max", format!("{}", s.ergodic_t_max));
            put(
                "solver.ergodic_agree_tol",
                format!("{}", s.ergodic_agree_tol),
            );
            let c = &self.convergence;
            put("convergence.pde_times", fmt_vec(&c.pde_times));
            put("convergence.tol_h", format!("{}", c.tol_h));
            put("convergence.tol_grad", format!("{}", c.tol_grad));
            put("convergence.mc_t", format!("{}", c.mc_t));
            put("convergence.mc_horizons", fmt_vec(&c.mc_horizons));
            put(
                "convergence.slices_per_window",
                format!("{}", c.slices_per_window),
            );
            put(
                "convergence.decrease_factor",
                format!("{}", c.decrease_factor),
            );
            let sw = &self.sandwich;
            put("sandwich.t", format!("{}", sw.t));
            put("sandwich.x0", fmt_vec(&sw.x0));
            put("sandwich.zeta_lo", format!("{}", sw.zeta_lo));
            put("sandwich.zeta_hi", format!("{}", sw.zeta_hi));
        }
        let sim = &self.simulation;
        put("simulation.n_paths", format!("{}", sim.n_paths));
        put("simulation.dt", format!("{}", sim.dt));
        put("simulation.horizon", format!("{}", sim.horizon));
        put("simulation.seed", format!("{}", sim.seed));
        put("simulation.antithetic", format!("{}", sim.antithetic));
        put("simulation.eps_psd", format!("{}", sim.eps_psd));
        put("simulation.ess_floor", format!("{}", sim.ess_floor));
        put("simulation.clip_warn", format!("{}", sim.clip_warn));
        put("simulation.save_times", fmt_vec(&sim.save_times));
        put("simulation.x0", fmt_vec(&sim.x0));
        match &self.lyapunov {
            LyapunovBlock::Vector {
                params,
                shell_radii,
                per_shell,
                probe_seed,
            } => {
                put("lyapunov.alpha1", format!("{}", params.alpha1));
                put("lyapunov.beta1", format!("{}", params.beta1));
                put("lyapunov.gamma1", format!("{}", params.gamma1));
                put("lyapunov.gamma2", format!("{}", params.gamma2));
                put("lyapunov.c1", format!("{}", params.c1));
                put("lyapunov.c2", format!("{}", params.c2));
                if let Some(a2) = params.alpha2 {
                    put("lyapunov.alpha2", format!("{a2}"));
                }
                if let Some(c3) = params.c3 {
                    put("lyapunov.c3", format!("{c3}"));
                }
                put("lyapunov.kappa_lo", format!("{}", params.kappa_lo));
                put("lyapunov.kappa_hi", format!("{}", params.kappa_hi));
                put("lyapunov.shell_radii", fmt_vec(shell_radii));
                put("lyapunov.per_shell", format!("{per_shell}"));
                put("lyapunov.probe_seed", format!("{probe_seed}"));
            }
            LyapunovBlock::Matrix { params, probe_seed } => {
                put("lyapunov.n0", format!("{}", params.n0));
                put("lyapunov.alpha1", format!("{}", params.alpha1));
                put("lyapunov.beta1", format!("{}", params.beta1));
                put("lyapunov.gamma1", format!("{}", params.gamma1));
                put("lyapunov.gamma2", format!("{}", params.gamma2));
                put("lyapunov.c_drift", format!("{}", params.c_drift));
                put("lyapunov.c_potential", format!("{}", params.c_potential));
                if let Some(a3) = params.alpha3 {
                    put("lyapunov.alpha3", format!("{a3}"));
                }
                if let Some(c3) = params.c3 {
                    put("lyapunov.c3", format!("{c3}"));
                }
                put("lyapunov.eps", format!("{}", params.eps));
                put("lyapunov.c0", format!("{}", params.c0));
                put("lyapunov.c1", format!("{}", params.c1));
                put("lyapunov.kappa_lo", format!("{}", params.kappa_lo));
                put("lyapunov.kappa_hi", format!("{}", params.kappa_hi));
                put("lyapunov.probe_seed", format!("{probe_seed}"));
            }
        }
        map
    }
}
