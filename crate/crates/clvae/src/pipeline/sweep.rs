//! Grid sweeps over any config key (β and latent size in particular) and
//! the paired 3-channel/4-channel discrepancy ablation.

use super::config::{apply_overrides, config_hash, ExperimentConfig};
use super::{cmd_eval, cmd_train, PipeResult, PipelineError};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub config_hash: String,
    pub fid: f64,
    pub mse: f64,
    pub auroc: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub cluster_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
}

fn axis_to_path(axis: &str) -> &str {
    match axis {
        "beta" => "loss.weights.beta",
        "latent_channels" => "vae.latent_channels",
        other => other,
    }
}

/// Trains and evaluates one run per value of the swept key, sharing every
/// other setting (in particular the data seed). Emits one aggregated CSV.
pub fn cmd_sweep(
    base: &ExperimentConfig,
    axis: &str,
    values: &[String],
) -> PipeResult<SweepTable> {
    if values.is_empty() {
        return Err(PipelineError::Config("sweep needs at least one value".into()));
    }
    let path = axis_to_path(axis);
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let cfg = apply_overrides(base, &[format!("{path}={value}")])?;
        let cfg = cfg.normalized()?;
        let train_out = cmd_train(&cfg)?;
        let eval_out = cmd_eval(&train_out.checkpoint_path, None, None)?;
        rows.push(SweepRow {
            value: value.clone(),
            config_hash: config_hash(&cfg)?,
            fid: eval_out.report.metrics.fid,
            mse: eval_out.report.metrics.mse,
            auroc: eval_out.report.metrics.auroc,
            tpr: eval_out.report.metrics.tpr,
            fpr: eval_out.report.metrics.fpr,
            cluster_accuracy: eval_out.report.cluster_accuracy,
        });
    }
    let sanitized: String = axis
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '_' })
        .collect();
    let base_hash = config_hash(&base.normalized()?)?;
    let csv_path = base
        .output_dir
        .join(format!("sweep-{sanitized}-{base_hash}.csv"));
    write_sweep_csv(&csv_path, axis, &rows)?;
    Ok(SweepTable {
        axis: axis.to_string(),
        rows,
        csv_path,
    })
}

fn write_sweep_csv(path: &PathBuf, axis: &str, rows: &[SweepRow]) -> PipeResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let io_err = |source| PipelineError::Io {
        path: path.clone(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    writeln!(f, "{axis},config_hash,fid,mse,auroc,tpr,fpr,cluster_accuracy").map_err(io_err)?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.value, r.config_hash, r.fid, r.mse, r.auroc, r.tpr, r.fpr, r.cluster_accuracy
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Side-by-side result of the paired discrepancy ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub three_channel: SweepRow,
    pub four_channel: SweepRow,
    pub csv_path: PathBuf,
}

/// Runs the 3-channel and 4-channel variants of one config and reports
/// both accuracies side by side, checking the shared invariants.
pub fn run_discrepancy_ablation(base: &ExperimentConfig) -> PipeResult<AblationReport> {
    let table = cmd_sweep(base, "ablation.use_discrepancy", &[
        "false".to_string(),
        "true".to_string(),
    ])?;
    let three = table.rows[0].clone();
    let four = table.rows[1].clone();
    for (name, row) in [("3-channel", &three), ("4-channel", &four)] {
        let finite = [row.fid, row.mse, row.auroc, row.tpr, row.fpr, row.cluster_accuracy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(PipelineError::Data2(format!(
                "{name} ablation arm produced non-finite metrics"
            )));
        }
        if !(0.0..=1.0).contains(&row.cluster_accuracy)
            || !(0.0..=1.0).contains(&row.auroc)
            || !(0.0..=1.0).contains(&row.tpr)
            || !(0.0..=1.0).contains(&row.fpr)
        {
            return Err(PipelineError::Data2(format!(
                "{name} ablation arm produced out-of-range rates"
            )));
        }
    }
    Ok(AblationReport {
        three_channel: three,
        four_channel: four,
        csv_path: table.csv_path,
    })
}
