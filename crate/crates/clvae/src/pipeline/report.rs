//! Consolidated report bundle for a finished run directory: final metrics
//! JSON plus the ROC, scatter, and box-plot-stats CSV exports. Corrupt or
//! missing pieces degrade to a partial report with an error section.

use super::config::{config_hash, ExperimentConfig};
use super::eval::ExperimentReport;
use super::{PipeResult, PipelineError};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize)]
pub struct ReportBundle {
    pub metrics_json: PathBuf,
    pub roc_csv: PathBuf,
    pub scatter_csv: PathBuf,
    pub boxplot_stats_csv: PathBuf,
    pub errors: Vec<String>,
}

#[derive(Serialize)]
struct MetricsDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tpr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fpr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cluster_accuracy: Option<f64>,
    config_hash: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    errors: Vec<String>,
}

/// Collects a run directory (after `train` + `eval`) into the report
/// bundle under `<run>/report/`.
pub fn cmd_report(run_dir: &Path) -> PipeResult<ReportBundle> {
    if !run_dir.is_dir() {
        return Err(PipelineError::Data2(format!(
            "run directory {} does not exist",
            run_dir.display()
        )));
    }
    let has_logs = run_dir.join("config.toml").exists()
        || run_dir.join("metrics.jsonl").exists()
        || run_dir.join("report.json").exists();
    if !has_logs {
        return Err(PipelineError::Data2(format!(
            "run directory {} contains no logs",
            run_dir.display()
        )));
    }

    let mut errors = Vec::new();

    // config hash: the stored config re-hashed
    let config_path = run_dir.join("config.toml");
    let hash = match std::fs::read_to_string(&config_path) {
        Ok(text) => match toml::from_str::<ExperimentConfig>(&text) {
            Ok(cfg) => config_hash(&cfg)?,
            Err(e) => {
                errors.push(format!("config.toml corrupt: {e}"));
                String::from("unknown")
            }
        },
        Err(e) => {
            errors.push(format!("config.toml unreadable: {e}"));
            String::from("unknown")
        }
    };

    let report: Option<ExperimentReport> =
        match std::fs::read_to_string(run_dir.join("report.json")) {
            Ok(text) => match serde_json::from_str(&text) {
                Ok(r) => Some(r),
                Err(e) => {
                    errors.push(format!("report.json corrupt: {e}"));
                    None
                }
            },
            Err(e) => {
                errors.push(format!("report.json missing (run eval first?): {e}"));
                None
            }
        };
    if let Some(r) = &report {
        if hash != "unknown" && r.config_hash != hash {
            errors.push(format!(
                "report config hash {} does not match stored config {}",
                r.config_hash, hash
            ));
        }
    }

    let out_dir = run_dir.join("report");
    std::fs::create_dir_all(&out_dir).map_err(|e| PipelineError::Io {
        path: out_dir.clone(),
        source: e,
    })?;

    let metrics_json = out_dir.join("metrics.json");
    let doc = MetricsDoc {
        fid: report.as_ref().map(|r| r.metrics.fid),
        mse: report.as_ref().map(|r| r.metrics.mse),
        auroc: report.as_ref().map(|r| r.metrics.auroc),
        tpr: report.as_ref().map(|r| r.metrics.tpr),
        fpr: report.as_ref().map(|r| r.metrics.fpr),
        cluster_accuracy: report.as_ref().map(|r| r.cluster_accuracy),
        config_hash: hash,
        errors: errors.clone(),
    };
    std::fs::write(
        &metrics_json,
        serde_json::to_string_pretty(&doc).map_err(|e| PipelineError::Config(e.to_string()))?,
    )
    .map_err(|e| PipelineError::Io {
        path: metrics_json.clone(),
        source: e,
    })?;

    // the CSV exports are copied through when present
    let mut copy = |name: &str, dest: &str| -> PathBuf {
        let src = run_dir.join(name);
        let dst = out_dir.join(dest);
        if src.exists() {
            if let Err(e) = std::fs::copy(&src, &dst) {
                errors.push(format!("cannot copy {name}: {e}"));
            }
        } else {
            errors.push(format!("{name} missing"));
        }
        dst
    };
    let roc_csv = copy("roc.csv", "roc.csv");
    let scatter_csv = copy("scatter.csv", "scatter.csv");
    let boxplot_stats_csv = copy("discrepancy_stats.csv", "boxplot_stats.csv");

    Ok(ReportBundle {
        metrics_json,
        roc_csv,
        scatter_csv,
        boxplot_stats_csv,
        errors,
    })
}
