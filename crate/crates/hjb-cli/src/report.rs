//! Machine-readable run reports: per-stage results, verdicts against the
//! declared tolerances, wall-clock per stage, and the artifact manifest.
//!
//! Reports are reproducible by construction: all maps are ordered
//! (`BTreeMap`), stage and verdict lists follow execution order, and every
//! wall-clock measurement lives under the single `timing_s` key, so two runs
//! of the same configuration produce byte-identical JSON apart from that
//! block.

use serde::Serialize;
use std::collections::BTreeMap;

/// Version stamp of the report schema emitted by this binary.
pub const SCHEMA_VERSION: u32 = 1;

/// Outcome of one pipeline stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    /// The stage ran to completion.
    Ok,
    /// A checker rejected the instance; later stages were skipped.
    Infeasible,
    /// An earlier stage was infeasible, so this one never ran.
    Skipped,
    /// The stage aborted with a runtime error.
    Failed,
}

/// One executed (or skipped) pipeline stage with its structured payload.
#[derive(Clone, Debug, Serialize)]
pub struct StageRecord {
    /// Stage name in execution order.
    pub name: String,
    /// Outcome.
    pub status: StageStatus,
    /// Human-readable summary (the structured reason when infeasible).
    pub detail: String,
    /// Stage-specific payload (checker reports, estimates, ...).
    pub data: serde_json::Value,
}

/// A named pass/fail check against a declared tolerance.
#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    /// Stable verdict name.
    pub name: String,
    /// Whether the check passed.
    pub pass: bool,
    /// The quantity, the tolerance, and the margin, spelled out.
    pub detail: String,
}

/// The full run report, serialized as `report.json` in the output directory.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    /// Report schema version.
    pub schema_version: u32,
    /// Pipeline that was executed.
    pub pipeline: String,
    /// Config echo with every default materialized, keyed `section.key`.
    pub config: BTreeMap<String, String>,
    /// Per-stage results in execution order.
    pub stages: Vec<StageRecord>,
    /// Pass/fail verdicts in emission order.
    pub verdicts: Vec<Verdict>,
    /// Conjunction of all verdicts (false as well when a stage failed or
    /// was found infeasible).
    pub pass: bool,
    /// Files written into the output directory, sorted.
    pub manifest: Vec<String>,
    /// Wall-clock seconds per stage plus `total`; the only
    /// run-to-run-varying block in the report.
    pub timing_s: BTreeMap<String, f64>,
}

impl RunReport {
    /// Renders the report as pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunReport {
        RunReport {
            schema_version: SCHEMA_VERSION,
            pipeline: "check-assumptions".to_string(),
            config: BTreeMap::from([
                ("model.family".to_string(), "lq".to_string()),
                ("solver.cfl".to_string(), "0.4".to_string()),
            ]),
            stages: vec![StageRecord {
                name: "assumptions".to_string(),
                status: StageStatus::Ok,
                detail: "ellipticity holds".to_string(),
                data: serde_json::json!({"kappa_lo": 1.0}),
            }],
            verdicts: vec![Verdict {
                name: "ellipticity".to_string(),
                pass: true,
                detail: "kappa_lo = 1 > 0".to_string(),
            }],
            pass: true,
            manifest: vec!["report.json".to_string()],
            timing_s: BTreeMap::from([("assumptions".to_string(), 0.01)]),
        }
    }

    #[test]
    fn serialization_is_deterministic_and_keyed() {
        let a = sample().to_json();
        let b = sample().to_json();
        assert_eq!(a, b);
        assert!(a.contains("\"schema_version\": 1"));
        assert!(a.contains("\"timing_s\""));
        assert!(a.ends_with('\n'));
    }

    #[test]
    fn timing_is_the_only_varying_block() {
        let mut a = sample();
        let mut b = sample();
        a.timing_s.insert("assumptions".to_string(), 0.25);
        b.timing_s.insert("assumptions".to_string(), 99.0);
        let strip = |r: &RunReport| {
            let mut v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
            v["timing_s"] = serde_json::Value::Null;
            v.to_string()
        };
        assert_eq!(strip(&a), strip(&b));
    }
}
