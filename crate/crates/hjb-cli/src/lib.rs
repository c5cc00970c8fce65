//! `hjblab` — command-line laboratory for the semilinear Cauchy problem
//! ∂_t v = ½ Tr(A D²v) + ½ ∇v′ Ā ∇v + B′∇v + V and its ergodic limit.
//!
//! A run is `hjblab <pipeline> --config <path> --out <dir>`: the INI-style
//! configuration picks the model family and numerical knobs, the pipeline
//! picks which stages execute, and the output directory receives plot-ready
//! CSV artifacts plus a `report.json` whose verdicts decide the exit code
//! (0 all pass, 1 a verdict failed or a stage was infeasible, 2 bad
//! configuration, 3 runtime failure). Reruns with the same configuration,
//! seed, and version produce byte-identical outputs modulo the timing block,
//! at any thread count.

pub mod config;
pub mod csvout;
pub mod pipelines;
pub mod report;

use clap::Parser;
use pipelines::CliError;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "hjblab",
    version,
    about = "numerical laboratory for ergodic HJB problems with quadratic gradient nonlinearity"
)]
struct Cli {
    /// Pipeline to run
    #[arg(value_enum)]
    pipeline: config::Pipeline,
    /// Path to the experiment configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides run.out from the configuration)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override simulation.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count (results are identical at any value)
    #[arg(long)]
    threads: Option<usize>,
    /// Allow writing into an output directory that already holds a report
    #[arg(long)]
    overwrite: bool,
}

/// Entry point for the `hjblab` binary; returns the process exit code.
pub fn run_cli() -> i32 {
    run_cli_from(std::env::args_os())
}

/// Testable entry point taking an explicit argument list.
pub fn run_cli_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version as "errors" with exit code 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_parsed(cli) {
        Ok(pass) => {
            if pass {
                0
            } else {
                1
            }
        }
        Err(CliError::Validation(errors)) => {
            for line in errors {
                eprintln!("error: {line}");
            }
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            3
        }
    }
}

fn run_parsed(cli: Cli) -> Result<bool, CliError> {
    if let Some(n) = cli.threads {
        // A failure here means a global pool already exists (e.g. under a
        // test harness); results do not depend on the pool size, so the
        // request is best-effort.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let text = std::fs::read_to_string(&cli.config).map_err(|e| {
        CliError::Validation(vec![format!("reading {}: {e}", cli.config.display())])
    })?;
    let mut cfg =
        config::validate(&text, Some(cli.pipeline)).map_err(CliError::Validation)?;
    if let Some(seed) = cli.seed {
        cfg.simulation.seed = seed;
    }
    let out_dir = cli
        .out
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            CliError::Validation(vec![
                "missing output directory (pass --out or set run.out)".to_string(),
            ])
        })?;
    let report_path = out_dir.join("report.json");
    if report_path.exists() && !cli.overwrite {
        return Err(CliError::Validation(vec![format!(
            "{} already exists (pass --overwrite to replace it)",
            report_path.display()
        )]));
    }
    let report = pipelines::execute(&cfg, &out_dir)?;
    for v in &report.verdicts {
        println!(
            "{} {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
    }
    println!(
        "{}: report written to {}",
        if report.pass { "PASS" } else { "FAIL" },
        report_path.display()
    );
    Ok(report.pass)
}
