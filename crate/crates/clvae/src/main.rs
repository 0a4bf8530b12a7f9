//! Command-line interface: `generate`, `train`, `eval`, `sweep`, `report`.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime/data error,
//! 3 numerical abort.

use clap::{Args, Parser, Subcommand};
use clvae::pipeline::{
    self, apply_overrides, cmd_eval, cmd_generate, cmd_report, cmd_sweep, cmd_train,
    load_config, override_all_seeds, ExperimentConfig, PipelineError,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "clvae",
    about = "Conditioned-latent-space VAE for anomaly classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key by dotted path, e.g. --set loss.weights.beta=0.01
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    set: Vec<String>,
    /// Override all seeds (model, data, backbone) at once.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, PipelineError> {
        let base = load_config(self.config.as_deref())?;
        let mut cfg = apply_overrides(&base, &self.set)?;
        if let Some(seed) = self.seed {
            override_all_seeds(&mut cfg, seed);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to PNGs plus a manifest.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model; writes config, metrics log, and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint: clustering metrics, ROC, FID/MSE, exports.
    Eval {
        /// Checkpoint file produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate against this (split-tagged) manifest instead of the
        /// dataset recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Write artifacts here instead of the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train + eval once per value of a swept config key.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Swept key: `beta`, `latent_channels`, or any dotted config path.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. --values 1,0.1,0.01
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Bundle a finished run directory into report files.
    Report {
        #[arg(long, value_name = "DIR")]
        run_dir: PathBuf,
    },
}

fn run() -> Result<(), PipelineError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config } => {
            let out = cmd_generate(&config.resolve()?)?;
            println!(
                "generated {} normal + {} anomaly samples",
                out.n_normal, out.n_anomaly
            );
            println!("manifest: {}", out.manifest_path.display());
        }
        Command::Train { config } => {
            let out = cmd_train(&config.resolve()?)?;
            println!("trained {} steps", out.steps);
            println!("run dir: {}", out.run_dir.display());
            println!("checkpoint: {}", out.checkpoint_path.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let outcome = cmd_eval(&checkpoint, manifest.as_deref(), out.as_deref())?;
            let m = &outcome.report.metrics;
            println!(
                "accuracy {:.4}  auroc {:.4}  tpr {:.4}  fpr {:.4}  fid {:.4}  mse {:.6}",
                outcome.report.cluster_accuracy, m.auroc, m.tpr, m.fpr, m.fid, m.mse
            );
            println!("report: {}", outcome.report_path.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
        } => {
            let table = cmd_sweep(&config.resolve()?, &axis, &values)?;
            for row in &table.rows {
                println!(
                    "{}={}  fid {:.4}  mse {:.6}  auroc {:.4}  accuracy {:.4}",
                    table.axis, row.value, row.fid, row.mse, row.auroc, row.cluster_accuracy
                );
            }
            println!("table: {}", table.csv_path.display());
        }
        Command::Report { run_dir } => {
            let bundle = cmd_report(&run_dir)?;
            println!("metrics: {}", bundle.metrics_json.display());
            println!("roc: {}", bundle.roc_csv.display());
            println!("scatter: {}", bundle.scatter_csv.display());
            println!("box-plot stats: {}", bundle.boxplot_stats_csv.display());
            for e in &bundle.errors {
                eprintln!("warning: {e}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap's usage errors normally exit 2; map them to 1 per our contract
    if let Err(e) = Cli::try_parse() {
        let _ = e.print();
        return match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                ExitCode::SUCCESS
            }
            _ => ExitCode::from(1),
        };
    }
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(pipeline::PipelineError::exit_code(&e) as u8)
        }
    }
}
