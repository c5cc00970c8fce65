//! Pipeline execution. Builds the model objects from a validated
//! configuration and runs the pipeline's stages in dependency order
//! (assumption checks → Lyapunov synthesis → PDE solves → Monte Carlo),
//! short-circuiting on infeasibility with a structured reason. Each stage
//! contributes a structured record, zero or more pass/fail verdicts, and
//! plot-ready CSV artifacts; the driver assembles them into a
//! [`RunReport`](crate::report::RunReport) written as `report.json`.

use crate::config::{
    ErgodicChoice, ExperimentConfig, LyapunovBlock, ModelSpec, Pipeline, SchemeChoice,
    WishartPotential,
};
use crate::csvout::{num, CsvTable};
use crate::report::{RunReport, StageRecord, StageStatus, Verdict, SCHEMA_VERSION};
use hjb_core::coeffs::{self, CoefficientField};
use hjb_core::functions::{Monomial, Polynomial};
use hjb_core::grid::Grid;
use hjb_core::lyapunov::{self, MatrixProbeSet};
use hjb_core::matrixdom::{self, SpdPoint, WishartParams};
use hjb_core::pdesolve::{
    self, inner_indices, DiscreteOperator, EigenOptions, ErgodicPair, NormalizationOptions,
    SchemeTag, SolutionField, SolutionHistory, StepOptions,
};
use hjb_core::stochsim::{
    self, AnalyticTilt, GradientSource, MCEstimate, SimConfig, TiltedDrift,
};
use nalgebra::DMatrix;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

/// Errors surfaced to the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or invocation (exit code 2); one line per problem.
    Validation(Vec<String>),
    /// A stage aborted (exit code 3).
    Runtime(String),
}

/// One pipeline stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Assumptions,
    Lyapunov,
    Ergodic,
    Cauchy,
    ConvergePde,
    ConvergeMc,
    Sandwich,
    Simulate,
    WishartDynamics,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Assumptions => "assumptions",
            Stage::Lyapunov => "lyapunov",
            Stage::Ergodic => "ergodic",
            Stage::Cauchy => "cauchy",
            Stage::ConvergePde => "converge-pde",
            Stage::ConvergeMc => "converge-mc",
            Stage::Sandwich => "sandwich",
            Stage::Simulate => "simulate",
            Stage::WishartDynamics => "wishart-dynamics",
        }
    }
}

fn stage_plan(pipeline: Pipeline, vector: bool) -> Vec<Stage> {
    use Stage::*;
    if vector {
        match pipeline {
            Pipeline::CheckAssumptions => vec![Assumptions, Lyapunov],
            Pipeline::SolveErgodic => vec![Assumptions, Lyapunov, Ergodic],
            Pipeline::SolveCauchy => vec![Assumptions, Lyapunov, Cauchy],
            Pipeline::ConvergePde => vec![Assumptions, Lyapunov, Ergodic, Cauchy, ConvergePde],
            Pipeline::ConvergeMc => vec![Assumptions, Lyapunov, Ergodic, Cauchy, ConvergeMc],
            Pipeline::Sandwich => vec![Assumptions, Lyapunov, Ergodic, Cauchy, Sandwich],
            Pipeline::Simulate => vec![Assumptions, Lyapunov, Ergodic, Simulate],
            Pipeline::FullBattery => vec![
                Assumptions,
                Lyapunov,
                Ergodic,
                Cauchy,
                ConvergePde,
                ConvergeMc,
                Sandwich,
            ],
        }
    } else {
        match pipeline {
            Pipeline::CheckAssumptions => vec![Assumptions, Lyapunov],
            Pipeline::Simulate => vec![Assumptions, WishartDynamics],
            Pipeline::FullBattery => vec![Assumptions, Lyapunov, WishartDynamics],
            // rejected during config validation
            _ => vec![Assumptions],
        }
    }
}

/// Model objects accumulated across stages.
#[derive(Default)]
struct State {
    field: Option<CoefficientField<f64>>,
    grid: Option<Arc<Grid<f64>>>,
    anchor_idx: Option<usize>,
    cole_hopf: Option<f64>,
    pair: Option<ErgodicPair<f64>>,
    slices: Vec<SolutionField<f64>>,
    wishart: Option<WishartParams<f64>>,
    mcoeffs: Option<matrixdom::MatrixCoefficients<f64>>,
    mprobes: Option<MatrixProbeSet<f64>>,
}

/// What one stage hands back to the driver.
struct StageOutput {
    record: StageRecord,
    verdicts: Vec<Verdict>,
    artifacts: Vec<(String, String)>,
}

impl StageOutput {
    fn ok(name: &str, detail: String, data: Value) -> Self {
        StageOutput {
            record: StageRecord {
                name: name.to_string(),
                status: StageStatus::Ok,
                detail,
                data,
            },
            verdicts: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn infeasible(name: &str, reason: String, data: Value) -> Self {
        StageOutput {
            record: StageRecord {
                name: name.to_string(),
                status: StageStatus::Infeasible,
                detail: reason,
                data,
            },
            verdicts: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn verdict(mut self, name: &str, pass: bool, detail: String) -> Self {
        self.verdicts.push(Verdict {
            name: name.to_string(),
            pass,
            detail,
        });
        self
    }

    fn artifact(mut self, name: &str, content: String) -> Self {
        self.artifacts.push((name.to_string(), content));
        self
    }
}

type StageResult = Result<StageOutput, String>;

fn err_str<E: std::fmt::Display>(e: E) -> String {
    format!("{e}")
}

fn to_value<S: serde::Serialize>(s: &S) -> Result<Value, String> {
    serde_json::to_value(s).map_err(err_str)
}

/// Builds the coefficient field for a vector-domain model.
fn build_field(model: &ModelSpec) -> Result<CoefficientField<f64>, String> {
    match model {
        ModelSpec::Lq {
            dim,
            a0,
            kappa,
            beta,
            gamma,
            v_const,
        } => CoefficientField::lq(*dim, *a0, *kappa, *beta, *gamma, *v_const).map_err(err_str),
        ModelSpec::CustomPoly {
            a,
            abar,
            b_linear,
            v_quad,
            v_const,
        } => {
            let dim = a.nrows();
            let mut b_polys = Vec::with_capacity(dim);
            for i in 0..dim {
                let mut terms = Vec::new();
                for j in 0..dim {
                    if b_linear[(i, j)] != 0.0 {
                        let mut exponents = vec![0u32; dim];
                        exponents[j] = 1;
                        terms.push(Monomial {
                            coefficient: b_linear[(i, j)],
                            exponents,
                        });
                    }
                }
                b_polys.push(Polynomial::new(dim, terms).map_err(err_str)?);
            }
            let mut v_terms = Vec::new();
            for i in 0..dim {
                for j in 0..dim {
                    if v_quad[(i, j)] != 0.0 {
                        let mut exponents = vec![0u32; dim];
                        exponents[i] += 1;
                        exponents[j] += 1;
                        v_terms.push(Monomial {
                            coefficient: v_quad[(i, j)],
                            exponents,
                        });
                    }
                }
            }
            if *v_const != 0.0 {
                v_terms.push(Monomial {
                    coefficient: *v_const,
                    exponents: vec![0u32; dim],
                });
            }
            let v_poly = Polynomial::new(dim, v_terms).map_err(err_str)?;
            CoefficientField::custom_poly(a.clone(), abar.clone(), b_polys, v_poly)
                .map_err(err_str)
        }
        ModelSpec::Wishart { .. } => Err("internal: vector field from a matrix model".to_string()),
    }
}

fn build_grid(cfg: &ExperimentConfig) -> Result<Arc<Grid<f64>>, String> {
    Grid::regular(&cfg.grid.lo, &cfg.grid.hi, &cfg.grid.nodes)
        .map(Arc::new)
        .map_err(err_str)
}

/// Deterministic probe cloud for the pointwise coefficient checks: an
/// even subsample of the active grid nodes.
fn ellipticity_samples(grid: &Grid<f64>) -> Vec<Vec<f64>> {
    let n = grid.node_count();
    let stride = (n / 200).max(1);
    (0..n)
        .step_by(stride)
        .filter(|&idx| grid.is_active(idx))
        .map(|idx| grid.position(idx))
        .collect()
}

fn step_options(cfg: &ExperimentConfig) -> StepOptions<f64> {
    StepOptions {
        scheme: match cfg.solver.scheme {
            SchemeChoice::Explicit => SchemeTag::Explicit,
            SchemeChoice::Imex => SchemeTag::Imex,
        },
        cfl: cfg.solver.cfl,
        dt: cfg.solver.dt,
        ..StepOptions::default()
    }
}

fn v0_values(cfg: &ExperimentConfig, grid: &Grid<f64>) -> Vec<f64> {
    let mut vals = vec![0.0; grid.node_count()];
    let mut pos = vec![0.0; grid.dim()];
    for (idx, slot) in vals.iter_mut().enumerate() {
        grid.position_into(idx, &mut pos);
        let r2: f64 = pos.iter().map(|x| x * x).sum();
        *slot = cfg.solver.v0_const - 0.5 * cfg.solver.v0_quad * r2;
    }
    vals
}

fn v0_at(cfg: &ExperimentConfig, x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    cfg.solver.v0_const - 0.5 * cfg.solver.v0_quad * r2
}

fn sim_config(cfg: &ExperimentConfig, horizon: f64) -> Result<SimConfig<f64>, String> {
    let sim = &cfg.simulation;
    let mut sc = SimConfig::new(sim.n_paths, sim.dt, horizon, sim.seed).map_err(err_str)?;
    sc = sc.with_antithetic(sim.antithetic);
    sc = sc.with_eps_psd(sim.eps_psd).map_err(err_str)?;
    sc.ess_floor = sim.ess_floor;
    sc.clip_warn_threshold = sim.clip_warn;
    Ok(sc)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n)
        .map(|k| a + (b - a) * (k as f64) / ((n - 1) as f64))
        .collect();
    out[0] = a;
    out[n - 1] = b;
    out
}

/// Sorted union of time groups, deduplicated within a relative tolerance.
fn merge_times(groups: Vec<Vec<f64>>) -> Vec<f64> {
    let mut all: Vec<f64> = groups.into_iter().flatten().collect();
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    all.dedup_by(|b, a| (*b - *a).abs() <= 1e-9 * (1.0 + a.abs()));
    all
}

fn find_slice(slices: &[SolutionField<f64>], t: f64) -> Result<&SolutionField<f64>, String> {
    slices
        .iter()
        .find(|s| (s.t - t).abs() <= 1e-8 * (1.0 + t.abs()))
        .ok_or_else(|| format!("internal: no solution slice at t = {t}"))
}

fn require_field(state: &State) -> Result<CoefficientField<f64>, String> {
    state
        .field
        .clone()
        .ok_or_else(|| "internal: coefficient field not built".to_string())
}

fn require_grid(state: &State) -> Result<Arc<Grid<f64>>, String> {
    state
        .grid
        .clone()
        .ok_or_else(|| "internal: grid not built".to_string())
}

fn require_pair(state: &State) -> Result<ErgodicPair<f64>, String> {
    state
        .pair
        .clone()
        .ok_or_else(|| "internal: ergodic pair not available".to_string())
}

// ---------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------

fn stage_assumptions(cfg: &ExperimentConfig, state: &mut State) -> StageResult {
    if cfg.model.is_vector() {
        let field = build_field(&cfg.model)?;
        let grid = build_grid(cfg)?;
        let samples = ellipticity_samples(&grid);
        let ell = coeffs::check_ellipticity(&field, &samples).map_err(err_str)?;
        let kappa = coeffs::cole_hopf_kappa(&field, &samples, 1e-8).map_err(err_str)?;
        let anchor_idx = grid.nearest_active_node(&cfg.solver.anchor).map_err(err_str)?;
        state.cole_hopf = kappa;
        state.field = Some(field);
        state.grid = Some(grid);
        state.anchor_idx = Some(anchor_idx);
        let data = json!({
            "ellipticity": to_value(&ell)?,
            "cole_hopf_kappa": kappa,
        });
        let detail = match kappa {
            Some(k) => format!(
                "uniform ellipticity holds on {} probes; linearizable with kappa = {k}",
                ell.samples
            ),
            None => format!(
                "uniform ellipticity holds on {} probes; not linearizable",
                ell.samples
            ),
        };
        let verdict_detail = format!(
            "smallest A eigenvalue {} and comparability bounds [{}, {}] on {} probes",
            ell.c_n_est, ell.kappa_lo, ell.kappa_hi, ell.samples
        );
        if ell.pass {
            Ok(StageOutput::ok("assumptions", detail, data).verdict(
                "ellipticity",
                true,
                verdict_detail,
            ))
        } else {
            Ok(StageOutput::infeasible(
                "assumptions",
                format!("ellipticity fail at probe {:?}", ell.worst_point),
                data,
            )
            .verdict("ellipticity", false, verdict_detail))
        }
    } else {
        let ModelSpec::Wishart {
            l,
            lambda,
            k,
            potential,
            abar_kappa,
            ..
        } = &cfg.model
        else {
            unreachable!("matrix stage on a vector model");
        };
        let p = WishartParams::new(l.clone(), lambda.clone(), k.clone()).map_err(err_str)?;
        let mut mc = matrixdom::wishart_coefficients(&p);
        if *potential == WishartPotential::NegNorm {
            mc = mc.with_potential(|x: &DMatrix<f64>| -x.norm());
        }
        if *abar_kappa > 0.0 {
            mc = mc.with_proportional_abar(*abar_kappa);
        }
        let gate = matrixdom::check_wishart_gate(&p);
        let LyapunovBlock::Matrix { params, probe_seed } = &cfg.lyapunov else {
            return Err("internal: matrix model without a matrix lyapunov block".to_string());
        };
        let probes = MatrixProbeSet::<f64>::generate(p.d(), params.n0, *probe_seed);
        let rep = lyapunov::check_matrix_assumptions(&mc, params, &probes).map_err(err_str)?;
        let mut reasons = Vec::new();
        if !rep.case_pass {
            reasons.push("case gate fail".to_string());
        }
        if rep.alpha1_slack < 0.0
            || rep.beta1_slack < 0.0
            || rep.v_upper_slack < 0.0
            || rep.v_lower_slack < 0.0
        {
            reasons.push("growth slack fail".to_string());
        }
        if !rep.h_eps_logdet_trend.pass {
            reasons.push("H-eps log-det trend fail".to_string());
        }
        if !rep.h0_v_trend.pass {
            reasons.push("H0 trend fail".to_string());
        }
        if !rep.pass && reasons.is_empty() {
            reasons.push("growth assumptions fail".to_string());
        }
        let data = json!({
            "wishart_gate": to_value(&gate)?,
            "assumptions": to_value(&rep)?,
        });
        let verdict_detail = format!(
            "boundary gate margin {} and probe-certified growth checks (pass = {})",
            gate.margin, rep.pass
        );
        state.wishart = Some(p);
        state.mcoeffs = Some(mc);
        state.mprobes = Some(probes);
        if rep.pass {
            Ok(StageOutput::ok(
                "assumptions",
                format!("matrix growth and boundary assumptions hold; gate margin {}", gate.margin),
                data,
            )
            .verdict("matrix-assumptions", true, verdict_detail))
        } else {
            Ok(StageOutput::infeasible("assumptions", reasons.join("; "), data).verdict(
                "matrix-assumptions",
                false,
                verdict_detail,
            ))
        }
    }
}

fn stage_lyapunov(cfg: &ExperimentConfig, state: &mut State) -> StageResult {
    match &cfg.lyapunov {
        LyapunovBlock::Vector {
            params,
            shell_radii,
            per_shell,
            probe_seed,
        } => {
            let field = require_field(state)?;
            let case = lyapunov::check_rd_case(params).map_err(err_str)?;
            let synth = lyapunov::synth_rd_lyapunov(params).map_err(err_str)?;
            if !case.pass || !synth.feasible {
                let reason = if case.pass {
                    format!("synthesis infeasible: {}", synth.messages.join("; "))
                } else {
                    format!("case gate fail: {}", case.detail)
                };
                let data = json!({
                    "case": to_value(&case)?,
                    "synthesis": to_value(&synth)?,
                });
                return Ok(StageOutput::infeasible("lyapunov", reason, data).verdict(
                    "lyapunov-feasible",
                    false,
                    format!("case {:?}, gate value {:?}", case.case, case.gate_value),
                ));
            }
            let shells =
                lyapunov::rd_sphere_shells::<f64>(field.dim(), shell_radii, *per_shell, *probe_seed);
            let trends = lyapunov::verify_rd_synthesis(&field, &synth, &shells).map_err(err_str)?;
            let [down, down_delta, up] = &trends;
            let trends_pass = down.pass && down_delta.pass && up.pass;
            let data = json!({
                "case": to_value(&case)?,
                "synthesis": to_value(&synth)?,
                "trend_phi0": to_value(down)?,
                "trend_delta_phi0": to_value(down_delta)?,
                "trend_psi0": to_value(up)?,
            });
            let verdict_detail = format!(
                "synthesized c = {}, c_tilde = {}, delta = {}, alpha = {}, eps0 = {}; divergence trends on {} shells",
                synth.c, synth.c_tilde, synth.delta, synth.alpha, synth.eps0, shell_radii.len()
            );
            if trends_pass {
                Ok(StageOutput::ok(
                    "lyapunov",
                    format!("feasible ({:?}); all three divergence trends verified", case.case),
                    data,
                )
                .verdict("lyapunov-feasible", true, verdict_detail))
            } else {
                let mut bad = Vec::new();
                if !down.pass {
                    bad.push("phi0 divergence trend fail");
                }
                if !down_delta.pass {
                    bad.push("delta phi0 divergence trend fail");
                }
                if !up.pass {
                    bad.push("psi0 divergence trend fail");
                }
                Ok(StageOutput::infeasible("lyapunov", bad.join("; "), data).verdict(
                    "lyapunov-feasible",
                    false,
                    verdict_detail,
                ))
            }
        }
        LyapunovBlock::Matrix { params, .. } => {
            let mc = state
                .mcoeffs
                .as_ref()
                .ok_or("internal: matrix coefficients not built")?;
            let probes = state
                .mprobes
                .as_ref()
                .ok_or("internal: matrix probes not built")?;
            let synth = lyapunov::synth_matrix_lyapunov(mc, params, probes).map_err(err_str)?;
            let data = json!({ "synthesis": to_value(&synth)? });
            let verdict_detail = format!(
                "synthesized c_lo = {}, c_hi = {}, delta = {}, alpha = {}, eps0 = {}",
                synth.c_lo, synth.c_hi, synth.delta, synth.alpha, synth.eps0
            );
            if synth.feasible {
                Ok(StageOutput::ok(
                    "lyapunov",
                    "matrix Lyapunov synthesis feasible; boundary and divergence trends verified"
                        .to_string(),
                    data,
                )
                .verdict("matrix-lyapunov-feasible", true, verdict_detail))
            } else {
                Ok(
                    StageOutput::infeasible("lyapunov", synth.messages.join("; "), data).verdict(
                        "matrix-lyapunov-feasible",
                        false,
                        verdict_detail,
                    ),
                )
            }
        }
    }
}

fn stage_ergodic(cfg: &ExperimentConfig, state: &mut State) -> StageResult {
    let field = require_field(state)?;
    let grid = require_grid(state)?;
    let anchor_idx = state.anchor_idx.ok_or("internal: anchor not resolved")?;
    let op = DiscreteOperator::new(grid.clone(), field.clone()).map_err(err_str)?;
    let v0 = v0_values(cfg, &grid);
    let step = step_options(cfg);
    let mut data = serde_json::Map::new();
    let mut norm_pair: Option<ErgodicPair<f64>> = None;
    let mut eigen_pair: Option<ErgodicPair<f64>> = None;

    if matches!(
        cfg.solver.ergodic_method,
        ErgodicChoice::Both | ErgodicChoice::Normalization
    ) {
        let opts = NormalizationOptions {
            probe_interval: cfg.solver.ergodic_probe_interval,
            tol: cfg.solver.ergodic_tol,
            t_max: cfg.solver.ergodic_t_max,
            step,
        };
        let pair = pdesolve::solve_ergodic_normalization(&op, &v0, anchor_idx, &opts)
            .map_err(err_str)?;
        data.insert(
            "normalization".to_string(),
            json!({ "lambda_hat": pair.lambda_hat, "residual": pair.residual }),
        );
        norm_pair = Some(pair);
    }
    match (cfg.solver.ergodic_method, state.cole_hopf) {
        (ErgodicChoice::Normalization, _) => {}
        (_, Some(kappa)) => {
            let opts = EigenOptions {
                anchor: Some(anchor_idx),
                ..EigenOptions::default()
            };
            let pair = pdesolve::solve_ergodic_eigen(&op, kappa, &opts).map_err(err_str)?;
            data.insert(
                "eigen".to_string(),
                json!({ "lambda_hat": pair.lambda_hat, "residual": pair.residual }),
            );
            eigen_pair = Some(pair);
        }
        (ErgodicChoice::Eigen, None) => {
            return Err(
                "ergodic_method = eigen requires a linearizable field (Abar = kappa A)".to_string(),
            );
        }
        (ErgodicChoice::Both, None) => {
            data.insert(
                "eigen".to_string(),
                Value::String("skipped: field is not linearizable".to_string()),
            );
        }
    }

    let mut out = StageOutput::ok("ergodic", String::new(), Value::Null);
    if let (Some(np), Some(ep)) = (&norm_pair, &eigen_pair) {
        let diff = (np.lambda_hat - ep.lambda_hat).abs();
        data.insert("lambda_diff".to_string(), json!(diff));
        out = out.verdict(
            "ergodic-agreement",
            diff <= cfg.solver.ergodic_agree_tol,
            format!(
                "|lambda_normalization - lambda_eigen| = {diff} (tolerance {})",
                cfg.solver.ergodic_agree_tol
            ),
        );
    }
    let pair = norm_pair
        .or(eigen_pair)
        .ok_or("internal: no ergodic route ran")?;
    out.record.detail = format!(
        "lambda_hat = {} ({:?} route), residual {}",
        pair.lambda_hat, pair.method, pair.residual
    );

    let mut csv = CsvTable::new(
        &(0..grid.dim())
            .map(|k| format!("x{k}"))
            .chain(["vhat".to_string()])
            .collect::<Vec<_>>()
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>(),
    );
    let mut pos = vec![0.0; grid.dim()];
    for idx in 0..grid.node_count() {
        if !grid.is_active(idx) {
            continue;
        }
        grid.position_into(idx, &mut pos);
        let mut row: Vec<String> = pos.iter().map(|&x| num(x)).collect();
        row.push(num(pair.vhat[idx]));
        csv.push_row(row);
    }
    out = out.artifact("vhat.csv", csv.render());
    out.record.data = Value::Object(data);
    state.pair = Some(pair);
    Ok(out)
}

fn stage_cauchy(cfg: &ExperimentConfig, state: &mut State, plan: &[Stage]) -> StageResult {
    let field = require_field(state)?;
    let grid = require_grid(state)?;
    let op = DiscreteOperator::new(grid.clone(), field).map_err(err_str)?;
    let v0 = v0_values(cfg, &grid);
    let step = step_options(cfg);

    let mut groups = vec![cfg.solver.snapshot_times.clone()];
    if plan.contains(&Stage::ConvergePde) {
        groups.push(cfg.convergence.pde_times.clone());
    }
    if plan.contains(&Stage::ConvergeMc) {
        for &big_t in &cfg.convergence.mc_horizons {
            groups.push(linspace(
                big_t - cfg.convergence.mc_t,
                big_t,
                cfg.convergence.slices_per_window,
            ));
        }
    }
    if plan.contains(&Stage::Sandwich) {
        groups.push(vec![cfg.sandwich.t]);
    }
    let times = merge_times(groups);
    let slices = pdesolve::run_cauchy(&op, &v0, &times, &step).map_err(err_str)?;

    let mut csv = CsvTable::new(
        &["t".to_string()]
            .into_iter()
            .chain((0..grid.dim()).map(|k| format!("x{k}")))
            .chain(["v".to_string()])
            .collect::<Vec<_>>()
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>(),
    );
    let mut pos = vec![0.0; grid.dim()];
    let mut anchor_trace = Vec::new();
    let anchor_idx = state.anchor_idx;
    for &t in &cfg.solver.snapshot_times {
        let slice = find_slice(&slices, t)?;
        for idx in 0..grid.node_count() {
            if !grid.is_active(idx) {
                continue;
            }
            grid.position_into(idx, &mut pos);
            let mut row = vec![num(slice.t)];
            row.extend(pos.iter().map(|&x| num(x)));
            row.push(num(slice.values[idx]));
            csv.push_row(row);
        }
        if let Some(a) = anchor_idx {
            anchor_trace.push(json!([slice.t, slice.values[a]]));
        }
    }
    let last = slices.last().expect("nonempty snapshot list");
    let data = json!({
        "times_solved": times,
        "total_steps": last.steps,
        "final_time": last.t,
        "v_anchor": anchor_trace,
    });
    let detail = format!(
        "advanced to t = {} in {} steps over {} snapshots",
        last.t,
        last.steps,
        times.len()
    );
    state.slices = slices;
    Ok(StageOutput::ok("cauchy", detail, data).artifact("solution.csv", csv.render()))
}

fn stage_converge_pde(cfg: &ExperimentConfig, state: &mut State) -> StageResult {
    let pair = require_pair(state)?;
    let grid = require_grid(state)?;
    let mut hfields = Vec::with_capacity(cfg.convergence.pde_times.len());
    for &t in &cfg.convergence.pde_times {
        let slice = find_slice(&state.slices, t)?;
        hfields.push(pdesolve::compute_h(slice, &pair).map_err(err_str)?);
    }
    let inner = inner_indices(&grid, 0.5);
    let rep = pdesolve::pointwise_convergence_report(
        &hfields,
        &inner,
        cfg.convergence.tol_h,
        cfg.convergence.tol_grad,
    )
    .map_err(err_str)?;

    let mut csv = CsvTable::new(
        &["t".to_string()]
            .into_iter()
            .chain((0..grid.dim()).map(|k| format!("x{k}")))
            .chain(["v".to_string(), "h".to_string(), "grad_h_norm".to_string()])
            .collect::<Vec<_>>()
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>(),
    );
    let mut pos = vec![0.0; grid.dim()];
    for (h, &t) in hfields.iter().zip(&cfg.convergence.pde_times) {
        let slice = find_slice(&state.slices, t)?;
        for idx in 0..grid.node_count() {
            if !grid.is_active(idx) {
                continue;
            }
            grid.position_into(idx, &mut pos);
            let mut row = vec![num(h.t)];
            row.extend(pos.iter().map(|&x| num(x)));
            row.push(num(slice.values[idx]));
            row.push(num(h.values[idx]));
            row.push(num(h.grad_norm_at(idx)));
            csv.push_row(row);
        }
    }

    let pass = rep.grad_pass && rep.h_monotone && rep.grad_monotone;
    let detail = format!(
        "final sup|grad h| = {} (tolerance {}), h deviations monotone = {}, gradient sups monotone = {}",
        rep.grad_sups.last().copied().unwrap_or(f64::NAN),
        cfg.convergence.tol_grad,
        rep.h_monotone,
        rep.grad_monotone
    );
    let data = to_value(&rep)?;
    Ok(StageOutput::ok(
        "converge-pde",
        format!("h flattening over t = {:?}", cfg.convergence.pde_times),
        data,
    )
    .verdict("pde-flattening", pass, detail)
    .artifact("hfield.csv", csv.render()))
}

/// Per-horizon Monte Carlo functional results.
struct McRow {
    big_t: f64,
    f_est: MCEstimate,
    supdev: MCEstimate,
    z_energy: MCEstimate,
    y_supdev: MCEstimate,
    identity_z: f64,
    route_gap: f64,
}

fn stage_converge_mc(cfg: &ExperimentConfig, state: &mut State) -> StageResult {
    let field = require_field(state)?;
    let pair = require_pair(state)?;
    let t = cfg.convergence.mc_t;
    let x0 = cfg.simulation.x0.clone();
    let sc = sim_config(cfg, t)?;
    let mut rows = Vec::new();
    let mut items = Vec::new();
    for &big_t in &cfg.convergence.mc_horizons {
        let (f_est, supdev) =
            stochsim::mc_convergence_functionals(&field, &state.slices, &pair, t, big_t, &x0, &sc)
                .map_err(err_str)?;
        let idc = stochsim::mc_identity_check(&field, &state.slices, &pair, t, big_t, &x0, &sc)
            .map_err(err_str)?;
        let bsde = stochsim::bsde_residuals(&field, &state.slices, &pair, t, big_t, &x0, &sc)
            .map_err(err_str)?;
        items.push(json!({
            "big_t": big_t,
            "f_est": to_value(&f_est)?,
            "supdev_est": to_value(&supdev)?,
            "z_energy": to_value(&bsde.z_energy)?,
            "y_supdev": to_value(&bsde.y_supdev)?,
            "identity": to_value(&idc)?,
            "route_gap": bsde.route_gap,
        }));
        rows.push(McRow {
            big_t,
            f_est,
            supdev,
            z_energy: bsde.z_energy,
            y_supdev: bsde.y_supdev,
            identity_z: idc.z_score,
            route_gap: bsde.route_gap,
        });
    }

    let mut csv = CsvTable::new(&[
        "big_t",
        "f_mean",
        "f_se",
        "supdev_mean",
        "supdev_se",
        "z_energy_mean",
        "z_energy_se",
        "y_supdev_mean",
        "y_supdev_se",
        "identity_z",
        "route_gap",
        "exit_fraction",
    ]);
    for r in &rows {
        csv.push_row(vec![
            num(r.big_t),
            num(r.f_est.mean),
            num(r.f_est.std_error),
            num(r.supdev.mean),
            num(r.supdev.std_error),
            num(r.z_energy.mean),
            num(r.z_energy.std_error),
            num(r.y_supdev.mean),
            num(r.y_supdev.std_error),
            num(r.identity_z),
            num(r.route_gap),
            num(r.f_est.exit_fraction),
        ]);
    }

    let max_z = rows
        .iter()
        .map(|r| r.identity_z.abs())
        .fold(0.0f64, f64::max);
    let first = rows.first().ok_or("no MC horizons")?;
    let last = rows.last().ok_or("no MC horizons")?;
    let factor = cfg.convergence.decrease_factor;
    let decreased = |a: &MCEstimate, b: &MCEstimate| {
        let target = a.mean / factor;
        let combined = (a.std_error / factor).hypot(b.std_error);
        b.mean <= target - 3.0 * combined
    };
    let f_ok = decreased(&first.f_est, &last.f_est);
    let z_ok = decreased(&first.z_energy, &last.z_energy);
    let out = StageOutput::ok(
        "converge-mc",
        format!(
            "functionals at t = {t} over horizons {:?} ({} paths)",
            cfg.convergence.mc_horizons, cfg.simulation.n_paths
        ),
        Value::Array(items),
    )
    .verdict(
        "mc-identity",
        max_z <= 3.0,
        format!("max |z| = {max_z} across horizons (tolerance 3)"),
    )
    .verdict(
        "mc-decrease",
        f_ok && z_ok,
        format!(
            "f: {} -> {} and z-energy: {} -> {} from T = {} to T = {} (required factor {factor} beyond 3 combined SE)",
            first.f_est.mean,
            last.f_est.mean,
            first.z_energy.mean,
            last.z_energy.mean,
            first.big_t,
            last.big_t
        ),
    )
    .artifact("mc.csv", csv.render());
    Ok(out)
}

/// Long-run Riccati weight of the analytic quadratic profile for the LQ
/// family; `None` when the model is not LQ or the profile is not confining.
fn lq_profile_weight(model: &ModelSpec) -> Option<f64> {
    let ModelSpec::Lq {
        a0,
        kappa,
        beta,
        gamma,
        ..
    } = model
    else {
        return None;
    };
    let disc = beta * beta + 2.0 * kappa * a0 * gamma;
    if disc <= 0.0 {
        return None;
    }
    let a_inf = (-beta + disc.sqrt()) / (kappa * a0);
    (a_inf > 0.0).then_some(a_inf)
}

fn stage_sandwich(cfg: &ExperimentConfig, state: &mut State) -> StageResult {
    let field = require_field(state)?;
    let grid = require_grid(state)?;
    let t = cfg.sandwich.t;
    let x0 = cfg.sandwich.x0.clone();
    let slice = find_slice(&state.slices, t)?;
    let v_pde = grid.interpolate(&slice.values, &x0);

    // phi0: the analytic long-run profile for the LQ family (a confining
    // quadratic tilt), the zero tilt otherwise.
    let a_inf = lq_profile_weight(&cfg.model).unwrap_or(0.0);
    let d = field.dim();
    let phi_val = move |x: &[f64]| -0.5 * a_inf * x.iter().map(|v| v * v).sum::<f64>();
    let phi_grad = move |x: &[f64], out: &mut [f64]| {
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = -a_inf * xi;
        }
    };
    let phi_hess = move |_x: &[f64]| DMatrix::from_diagonal_element(d, d, -a_inf);
    let tilt = AnalyticTilt {
        value: &phi_val,
        gradient: &phi_grad,
        hessian: &phi_hess,
    };
    let v0f = |x: &[f64]| v0_at(cfg, x);

    let sc = sim_config(cfg, t)?;
    let psi_lo = stochsim::mc_sandwich(&field, &tilt, &v0f, cfg.sandwich.zeta_lo, t, &x0, &sc)
        .map_err(err_str)?;
    let psi_hi = if (cfg.sandwich.zeta_hi - cfg.sandwich.zeta_lo).abs() < 1e-14 {
        psi_lo.clone()
    } else {
        stochsim::mc_sandwich(&field, &tilt, &v0f, cfg.sandwich.zeta_hi, t, &x0, &sc)
            .map_err(err_str)?
    };

    let lo_ok = psi_lo.mean - 3.0 * psi_lo.std_error <= v_pde;
    let hi_ok = v_pde <= psi_hi.mean + 3.0 * psi_hi.std_error;
    let mut csv = CsvTable::new(&["zeta", "psi_mean", "psi_se", "ess", "v_pde"]);
    for (zeta, est) in [
        (cfg.sandwich.zeta_lo, &psi_lo),
        (cfg.sandwich.zeta_hi, &psi_hi),
    ] {
        csv.push_row(vec![
            num(zeta),
            num(est.mean),
            num(est.std_error),
            num(est.n_effective),
            num(v_pde),
        ]);
    }
    let data = json!({
        "t": t,
        "x0": x0,
        "v_pde": v_pde,
        "zeta_lo": cfg.sandwich.zeta_lo,
        "zeta_hi": cfg.sandwich.zeta_hi,
        "psi_lo": to_value(&psi_lo)?,
        "psi_hi": to_value(&psi_hi)?,
        "phi0_weight": -a_inf,
    });
    Ok(StageOutput::ok(
        "sandwich",
        format!(
            "psi({}) = {} and psi({}) = {} around v = {v_pde}",
            cfg.sandwich.zeta_lo, psi_lo.mean, cfg.sandwich.zeta_hi, psi_hi.mean
        ),
        data,
    )
    .verdict(
        "sandwich-brackets",
        lo_ok && hi_ok,
        format!(
            "psi_lo - 3se = {} <= v = {v_pde} <= psi_hi + 3se = {}",
            psi_lo.mean - 3.0 * psi_lo.std_error,
            psi_hi.mean + 3.0 * psi_hi.std_error
        ),
    )
    .artifact("sandwich.csv", csv.render()))
}

fn stage_simulate(cfg: &ExperimentConfig, state: &mut State) -> StageResult {
    let field = require_field(state)?;
    let pair = require_pair(state)?;
    let mut hist = SolutionHistory::new(pair.grid.clone());
    hist.record_values(0.0, &pair.vhat).map_err(err_str)?;
    let drift = TiltedDrift::new(&field, GradientSource::Grid(&hist)).map_err(err_str)?;
    let mut sc = sim_config(cfg, cfg.simulation.horizon)?;
    sc = sc
        .with_save_times(cfg.simulation.save_times.clone())
        .map_err(err_str)?;
    let bundle = stochsim::simulate_tilted(&drift, &cfg.simulation.x0, &sc).map_err(err_str)?;

    let d = field.dim();
    let mut csv = CsvTable::new(&["t", "axis", "mean", "sd", "min", "max"]);
    for (j, &s) in bundle.save_times.iter().enumerate() {
        for k in 0..d {
            let samples: Vec<f64> = bundle.states.iter().map(|path| path[j][k]).collect();
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / (n - 1.0).max(1.0);
            let mn = samples.iter().copied().fold(f64::INFINITY, f64::min);
            let mx = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            csv.push_row(vec![
                num(s),
                format!("{k}"),
                num(mean),
                num(var.sqrt()),
                num(mn),
                num(mx),
            ]);
        }
    }
    let data = json!({
        "n_paths": bundle.n_paths(),
        "exit_fraction": bundle.exit_fraction(),
        "total_steps": bundle.total_steps,
        "save_times": bundle.save_times,
    });
    Ok(StageOutput::ok(
        "simulate",
        format!(
            "{} paths under the stationary-profile tilt to t = {} (exit fraction {})",
            bundle.n_paths(),
            cfg.simulation.horizon,
            bundle.exit_fraction()
        ),
        data,
    )
    .artifact("paths.csv", csv.render()))
}

/// Deterministic trace of the Euler mean recursion
/// m ← m + dt (LL′ + Km + mK′) over the simulation's exact step
/// segmentation; the Monte Carlo mean is unbiased for it (the noise term
/// has zero mean), so it serves as the oracle for the dynamics verdict.
fn euler_mean(p: &WishartParams<f64>, x0: &DMatrix<f64>, sc: &SimConfig<f64>) -> DMatrix<f64> {
    let ll = &p.l * p.l.transpose();
    let mut m = x0.clone();
    let mut t = 0.0f64;
    for &s in &sc.save_times {
        let snap = 1e-9 * s.abs().max(1.0);
        while t < s - snap {
            let dt = sc.dt.min(s - t);
            m = &m + (&ll + &p.k * &m + &m * p.k.transpose()) * dt;
            t += dt;
        }
        t = s;
    }
    m
}

/// Stationary mean of the Wishart-type dynamics when `sym(K)` is stable:
/// the solution M of LL′ + KM + MK′ = 0 via the Kronecker system.
fn stationary_mean(p: &WishartParams<f64>) -> Option<DMatrix<f64>> {
    let d = p.d();
    let eye = DMatrix::<f64>::identity(d, d);
    let sys = eye.kronecker(&p.k) + p.k.kronecker(&eye);
    let ll = &p.l * p.l.transpose();
    let rhs = DMatrix::from_iterator(d * d, 1, ll.iter().map(|&v| -v));
    let lu = sys.lu();
    let sol = lu.solve(&rhs)?;
    let m = DMatrix::from_iterator(d, d, sol.iter().copied());
    m.iter().all(|v| v.is_finite()).then_some(m)
}

fn stage_wishart_dynamics(cfg: &ExperimentConfig, state: &mut State) -> StageResult {
    let p = state
        .wishart
        .clone()
        .ok_or("internal: wishart parameters not built")?;
    let ModelSpec::Wishart { x0, .. } = &cfg.model else {
        unreachable!("wishart stage on a vector model");
    };
    let start = SpdPoint::new(x0.clone(), 1e-9).map_err(err_str)?;
    let mut sc = sim_config(cfg, cfg.simulation.horizon)?;
    sc = sc
        .with_save_times(cfg.simulation.save_times.clone())
        .map_err(err_str)?;
    let bundle = stochsim::simulate_wishart(&p, &start, &sc).map_err(err_str)?;

    let d = p.d();
    let mut csv = CsvTable::new(&["t", "trace_mean", "trace_sd"]);
    let mut final_traces = Vec::new();
    for (j, &s) in bundle.save_times.iter().enumerate() {
        let traces: Vec<f64> = bundle
            .states
            .iter()
            .map(|path| {
                matrixdom::ell_inv_symmetric(path[j].as_slice(), d)
                    .map(|m| m.trace())
                    .unwrap_or(f64::NAN)
            })
            .collect();
        if traces.iter().any(|v| !v.is_finite()) {
            return Err("non-finite trace in the Wishart bundle".to_string());
        }
        let n = traces.len() as f64;
        let mean = traces.iter().sum::<f64>() / n;
        let var =
            traces.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        csv.push_row(vec![num(s), num(mean), num(var.sqrt())]);
        if j + 1 == bundle.save_times.len() {
            final_traces = traces;
        }
    }
    let est = stochsim::estimate_from_samples(&final_traces, &bundle.exited, "trace")
        .map_err(err_str)?;
    let em_trace = euler_mean(&p, x0, &sc).trace();
    let stat_trace = stationary_mean(&p).map(|m| m.trace());
    let clip = bundle.clip_fraction();

    let mean_ok = (est.mean - em_trace).abs() <= 3.0 * est.std_error;
    let clip_ok = clip < cfg.simulation.clip_warn;
    let data = json!({
        "trace_estimate": to_value(&est)?,
        "euler_mean_trace": em_trace,
        "stationary_mean_trace": stat_trace,
        "clip_fraction": clip,
        "exit_fraction": bundle.exit_fraction(),
        "total_steps": bundle.total_steps,
        "scheme_warning": bundle.scheme_warning,
    });
    Ok(StageOutput::ok(
        "wishart-dynamics",
        format!(
            "{} paths to t = {}; trace mean {} (exact Euler mean {})",
            bundle.n_paths(),
            cfg.simulation.horizon,
            est.mean,
            em_trace
        ),
        data,
    )
    .verdict(
        "wishart-mean",
        mean_ok,
        format!(
            "|{} - {}| = {} vs 3 SE = {}",
            est.mean,
            em_trace,
            (est.mean - em_trace).abs(),
            3.0 * est.std_error
        ),
    )
    .verdict(
        "wishart-clip",
        clip_ok,
        format!("clip fraction {clip} (threshold {})", cfg.simulation.clip_warn),
    )
    .artifact("wishart.csv", csv.render()))
}

fn run_stage(stage: Stage, cfg: &ExperimentConfig, state: &mut State, plan: &[Stage]) -> StageResult {
    match stage {
        Stage::Assumptions => stage_assumptions(cfg, state),
        Stage::Lyapunov => stage_lyapunov(cfg, state),
        Stage::Ergodic => stage_ergodic(cfg, state),
        Stage::Cauchy => stage_cauchy(cfg, state, plan),
        Stage::ConvergePde => stage_converge_pde(cfg, state),
        Stage::ConvergeMc => stage_converge_mc(cfg, state),
        Stage::Sandwich => stage_sandwich(cfg, state),
        Stage::Simulate => stage_simulate(cfg, state),
        Stage::WishartDynamics => stage_wishart_dynamics(cfg, state),
    }
}

fn assemble_report(
    cfg: &ExperimentConfig,
    stages: Vec<StageRecord>,
    verdicts: Vec<Verdict>,
    mut manifest: Vec<String>,
    timing: BTreeMap<String, f64>,
    pass: bool,
) -> RunReport {
    manifest.sort();
    manifest.dedup();
    RunReport {
        schema_version: SCHEMA_VERSION,
        pipeline: cfg.pipeline.tag().to_string(),
        config: cfg.echo(),
        stages,
        verdicts,
        pass,
        manifest,
        timing_s: timing,
    }
}

/// Runs the configured pipeline, writing artifacts and `report.json` into
/// `out_dir`. Stage runtime errors still produce a best-effort report with
/// the failed stage recorded.
pub fn execute(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", out_dir.display())))?;
    let plan = stage_plan(cfg.pipeline, cfg.model.is_vector());
    let mut state = State::default();
    let mut stages: Vec<StageRecord> = Vec::new();
    let mut verdicts: Vec<Verdict> = Vec::new();
    let mut manifest = vec!["report.json".to_string()];
    let mut timing = BTreeMap::new();
    let mut short: Option<String> = None;
    let total0 = Instant::now();

    for &stage in &plan {
        let name = stage.name();
        if let Some(reason) = &short {
            stages.push(StageRecord {
                name: name.to_string(),
                status: StageStatus::Skipped,
                detail: format!("skipped: {reason}"),
                data: Value::Null,
            });
            continue;
        }
        let t0 = Instant::now();
        let result = run_stage(stage, cfg, &mut state, &plan);
        timing.insert(name.to_string(), t0.elapsed().as_secs_f64());
        match result {
            Ok(out) => {
                if out.record.status == StageStatus::Infeasible {
                    short = Some(out.record.detail.clone());
                }
                for (fname, content) in out.artifacts {
                    std::fs::write(out_dir.join(&fname), content)
                        .map_err(|e| CliError::Runtime(format!("writing {fname}: {e}")))?;
                    manifest.push(fname);
                }
                verdicts.extend(out.verdicts);
                stages.push(out.record);
            }
            Err(msg) => {
                stages.push(StageRecord {
                    name: name.to_string(),
                    status: StageStatus::Failed,
                    detail: msg.clone(),
                    data: Value::Null,
                });
                timing.insert("total".to_string(), total0.elapsed().as_secs_f64());
                let report = assemble_report(cfg, stages, verdicts, manifest, timing, false);
                let _ = std::fs::write(out_dir.join("report.json"), report.to_json());
                return Err(CliError::Runtime(format!("stage {name}: {msg}")));
            }
        }
    }

    timing.insert("total".to_string(), total0.elapsed().as_secs_f64());
    let pass = short.is_none() && verdicts.iter().all(|v| v.pass);
    let report = assemble_report(cfg, stages, verdicts, manifest, timing, pass);
    std::fs::write(out_dir.join("report.json"), report.to_json())
        .map_err(|e| CliError::Runtime(format!("writing report.json: {e}")))?;
    Ok(report)
}
