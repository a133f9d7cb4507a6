//! Threshold sweeps and result reporting.
//!
//! A sweep reruns the same batch in adaswitch mode across a list of
//! activation thresholds and tabulates (p, accuracy, mean cost). Reports
//! fold one or more run summaries into a fixed-column CSV
//! (`method,p,accuracy,mean_flops,escalation_rate`), JSON, or an SVG
//! accuracy/cost frontier. Cost is always FLOPs from the first-order
//! formula in [`crate::metrics`], and the formula is stated in the output.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentEnv, AgentProfile};
use crate::exam::DatasetRecord;
use crate::metrics::reference_points;
use crate::orchestrator::{
    run_batch, Aggregate, BatchOptions, InferenceConfig, InferenceMode, OrchestratorError,
    RunContext,
};
use crate::policy::{policy_spec, PolicyConfig};
use crate::tools::ToolContext;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("nothing to report")]
    Empty,
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

/// One sweep table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub accuracy: f64,
    pub mean_cost: f64,
    pub escalation_rate: f64,
}

/// Run one adaswitch batch per threshold and tabulate the outcome.
/// Per-record failures count as wrong answers.
#[allow(clippy::too_many_arguments)]
pub fn sweep_threshold(
    records: &[DatasetRecord],
    env: &AgentEnv,
    local: &AgentProfile,
    cloud: &AgentProfile,
    base_tools: &ToolContext,
    thresholds: &[f64],
    template: &InferenceConfig,
    opts: BatchOptions,
) -> Result<Vec<SweepRow>, ReportError> {
    let mut rows = Vec::with_capacity(thresholds.len());
    for &p in thresholds {
        let cfg = InferenceConfig {
            mode: InferenceMode::AdaSwitch,
            policy: PolicyConfig::Adaptive { p },
            ..template.clone()
        };
        let rc = RunContext {
            env,
            local,
            cloud: Some(cloud),
            base_tools,
            cfg: &cfg,
        };
        let report = run_batch(records, rc, opts)?;
        rows.push(SweepRow {
            p,
            accuracy: report.aggregate.accuracy,
            mean_cost: report.aggregate.mean_flops,
            escalation_rate: report.aggregate.escalation_rate,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), ReportError> {
    let mut out = String::from("p,accuracy,mean_cost,escalation_rate\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.p, row.accuracy, row.mean_cost, row.escalation_rate
        ));
    }
    write_text(path, &out)
}

pub fn write_sweep_json(path: &Path, rows: &[SweepRow]) -> Result<(), ReportError> {
    let body = serde_json::json!({
        "cost_model": COST_MODEL_NOTE,
        "rows": rows,
    });
    write_text(path, &format!("{}\n", serde_json::to_string_pretty(&body).expect("serializes")))
}

/// Stated in every report so cost columns are interpretable.
pub const COST_MODEL_NOTE: &str =
    "flops = 2 * param_count * (prompt_tokens + generated_tokens), summed over calls";

/// Summary of one batch run, the unit reports are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mode: String,
    pub policy: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p: Option<f64>,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub escalation_rate: f64,
    pub failures: usize,
    pub seed: u64,
}

/// Report-facing method name: the switching strategy when the cloud is in
/// play, the plain mode otherwise.
pub fn method_name(mode: InferenceMode, policy: &PolicyConfig) -> String {
    match (mode, policy) {
        (InferenceMode::AdaSwitch, PolicyConfig::Adaptive { .. }) => "adaswitch".into(),
        (InferenceMode::AdaSwitch, PolicyConfig::Random { .. }) => "random_switch".into(),
        (InferenceMode::AdaSwitch, PolicyConfig::Sequential { .. }) => "sequential_switch".into(),
        (InferenceMode::AdaSwitch, PolicyConfig::Confidence { .. }) => "confidence_switch".into(),
        (InferenceMode::AdaSwitch, PolicyConfig::Never) => "adaswitch_never".into(),
        (InferenceMode::AdaSwitch, PolicyConfig::Always) => "adaswitch_always".into(),
        (InferenceMode::LocalOnly, _) => "local_only".into(),
        (InferenceMode::CloudOnly, _) => "cloud_only".into(),
        (InferenceMode::SelfReflection, _) => "self_reflection".into(),
    }
}

fn mode_name(mode: InferenceMode) -> &'static str {
    match mode {
        InferenceMode::LocalOnly => "local_only",
        InferenceMode::CloudOnly => "cloud_only",
        InferenceMode::SelfReflection => "self_reflection",
        InferenceMode::AdaSwitch => "adaswitch",
    }
}

pub fn summarize(
    mode: InferenceMode,
    policy: &PolicyConfig,
    aggregate: &Aggregate,
    seed: u64,
) -> MethodSummary {
    let p = match policy {
        PolicyConfig::Adaptive { p }
        | PolicyConfig::Confidence { p, .. }
        | PolicyConfig::Random { p, .. } => Some(*p),
        _ => None,
    };
    MethodSummary {
        method: method_name(mode, policy),
        mode: mode_name(mode).to_string(),
        policy: policy_spec(policy),
        p,
        n: aggregate.n,
        correct: aggregate.correct,
        accuracy: aggregate.accuracy,
        mean_flops: aggregate.mean_flops,
        escalation_rate: aggregate.escalation_rate,
        failures: aggregate.failures,
        seed,
    }
}

pub fn write_summary(path: &Path, summary: &MethodSummary) -> Result<(), ReportError> {
    write_text(
        path,
        &format!(
            "{}\n",
            serde_json::to_string_pretty(summary).expect("serializes")
        ),
    )
}

pub fn read_summary(path: &Path) -> Result<MethodSummary, ReportError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: display.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: display,
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    SvgPlot,
}

/// Emit the accuracy/cost report in the requested format. Returns the
/// written path.
pub fn write_report(
    out_dir: &Path,
    summaries: &[MethodSummary],
    format: ReportFormat,
) -> Result<PathBuf, ReportError> {
    if summaries.is_empty() {
        return Err(ReportError::Empty);
    }
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    match format {
        ReportFormat::Csv => {
            let path = out_dir.join("report.csv");
            let mut out = String::from("method,p,accuracy,mean_flops,escalation_rate\n");
            for s in summaries {
                let p = s.p.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    s.method, p, s.accuracy, s.mean_flops, s.escalation_rate
                ));
            }
            write_text(&path, &out)?;
            Ok(path)
        }
        ReportFormat::Json => {
            let path = out_dir.join("report.json");
            let body = serde_json::json!({
                "cost_model": COST_MODEL_NOTE,
                "detection_reference_points": {
                    "rule_label": {
                        "tpr": reference_points::RULE_LABEL_TPR,
                        "tnr": reference_points::RULE_LABEL_TNR,
                    },
                    "adaptive": {
                        "tpr": reference_points::ADAPTIVE_TPR,
                        "tnr": reference_points::ADAPTIVE_TNR,
                    },
                    "confidence": {
                        "tpr": reference_points::CONFIDENCE_TPR,
                        "tnr": reference_points::CONFIDENCE_TNR,
                    },
                },
                "methods": summaries,
            });
            write_text(
                &path,
                &format!("{}\n", serde_json::to_string_pretty(&body).expect("serializes")),
            )?;
            Ok(path)
        }
        ReportFormat::SvgPlot => {
            let path = out_dir.join("frontier.svg");
            write_text(&path, &frontier_svg(summaries))?;
            Ok(path)
        }
    }
}

/// Accuracy (y) against mean FLOPs (x) as a labeled scatter.
fn frontier_svg(summaries: &[MethodSummary]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const MARGIN: f64 = 60.0;
    let max_cost = summaries
        .iter()
        .map(|s| s.mean_flops)
        .fold(f64::MIN_POSITIVE, f64::max);
    let x = |cost: f64| MARGIN + (cost / max_cost) * (W - 2.0 * MARGIN);
    let y = |acc: f64| H - MARGIN - acc * (H - 2.0 * MARGIN);

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<line x1="{m}" y1="{ybase}" x2="{xmax}" y2="{ybase}" stroke="black"/>
<line x1="{m}" y1="{m}" x2="{m}" y2="{ybase}" stroke="black"/>
<text x="{xmid}" y="{H}" dy="-12" text-anchor="middle" font-size="13">mean cost (FLOPs)</text>
<text x="16" y="{ymid}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {ymid})">accuracy</text>
"#,
        m = MARGIN,
        ybase = H - MARGIN,
        xmax = W - MARGIN,
        xmid = W / 2.0,
        ymid = H / 2.0,
    );
    for tick in [0.0f64, 0.25, 0.5, 0.75, 1.0] {
        svg.push_str(&format!(
            r#"<text x="{x}" y="{y}" dx="-8" dy="4" text-anchor="end" font-size="11">{tick}</text>
"#,
            x = MARGIN,
            y = y(tick),
        ));
    }
    let mut points: Vec<&MethodSummary> = summaries.iter().collect();
    points.sort_by(|a, b| a.mean_flops.total_cmp(&b.mean_flops));
    for s in &points {
        svg.push_str(&format!(
            r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="5" fill="steelblue"/>
<text x="{cx:.1}" y="{cy:.1}" dx="8" dy="4" font-size="12">{label}</text>
"#,
            cx = x(s.mean_flops),
            cy = y(s.accuracy),
            label = s.method,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn write_text(path: &Path, content: &str) -> Result<(), ReportError> {
    let display = path.display().to_string();
    let mut file = File::create(path).map_err(|source| ReportError::Io {
        path: display.clone(),
        source,
    })?;
    file.write_all(content.as_bytes())
        .map_err(|source| ReportError::Io {
            path: display,
            source,
        })
}
