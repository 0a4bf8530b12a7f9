//! Evaluation: encode the splits, fit and map k-means on training latents,
//! classify the held-out test set, and compute FID/MSE/ROC/TPR/FPR plus
//! the PCA scatter and discrepancy-score exports.

use super::config::{config_hash, ExperimentConfig};
use super::data::{make_provider, prepare_data};
use super::{PipeResult, PipelineError};
use crate::clustering::{
    classify, kmeans_fit, map_clusters_to_labels, pca_fit_project, write_scatter_csv,
    ClusterModel, ScatterRow,
};
use crate::datamodel::{DatasetSplits, ImageSample, Label};
use crate::discrepancy::{
    mean_anomaly_score, score_distribution_stats, write_score_stats_csv, DatasetScoreRow,
};
use crate::losses::{reconstruction_loss, PerceptualBackbone};
use crate::metrics::{fid, roc_curve, tpr_fpr, write_roc_csv, MetricsReport, RocCurve};
use crate::vae::{load_checkpoint, Vae};
use ndarray::{s, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Mean unweighted loss components over one epoch of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub distance: f64,
    pub cluster: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// The consolidated result of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub epochs: Vec<EpochSummary>,
    pub metrics: MetricsReport,
    /// Fraction of held-out test samples whose k-means label matches.
    pub cluster_accuracy: f64,
    /// TPR/FPR of the fitted classifier re-applied to its own training
    /// split (sanity ordering against the held-out rates).
    pub train_tpr: f64,
    pub train_fpr: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub scatter_path: PathBuf,
    pub wall_clock_seconds: f64,
}

pub struct EvalOutcome {
    pub report: ExperimentReport,
    pub report_path: PathBuf,
    pub roc_path: PathBuf,
    pub scatter_path: PathBuf,
    pub stats_path: PathBuf,
    pub roc: RocCurve,
}

/// Encodes samples in bounded chunks, returning flattened posterior means.
fn encode_latents(vae: &Vae, samples: &[ImageSample]) -> PipeResult<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for group in samples.chunks(32) {
        let mut batch = Array4::zeros((
            group.len(),
            vae.spec().input_channels,
            vae.spec().image_size,
            vae.spec().image_size,
        ));
        for (i, s) in group.iter().enumerate() {
            batch.index_axis_mut(Axis(0), i).assign(&s.pixels);
        }
        let (mu, _) = vae.encode(&batch).map_err(PipelineError::Vae)?;
        for i in 0..group.len() {
            out.push(mu.index_axis(Axis(0), i).iter().copied().collect());
        }
    }
    Ok(out)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Reconstructions of a sample set. MSE uses the deterministic
/// posterior-mean decode; FID compares distributions, so it uses decodes of
/// sampled latent codes (noise seeded per sample index).
fn reconstruct(
    vae: &Vae,
    samples: &[ImageSample],
    eps_seed: u64,
) -> PipeResult<(Array4<f64>, Array4<f64>, Array4<f64>)> {
    use crate::seeding;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let n = samples.len();
    let spec = vae.spec();
    let mut x = Array4::zeros((n, spec.input_channels, spec.image_size, spec.image_size));
    for (i, s) in samples.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&s.pixels);
    }
    let mut xhat_mean = Array4::zeros(x.raw_dim());
    let mut xhat_sampled = Array4::zeros(x.raw_dim());
    for start in (0..n).step_by(32) {
        let end = (start + 32).min(n);
        let chunk = x.slice(s![start..end, .., .., ..]).to_owned();
        let (mu, logvar) = vae.encode(&chunk).map_err(PipelineError::Vae)?;
        let recon = vae.decode(&mu).map_err(PipelineError::Vae)?;
        xhat_mean.slice_mut(s![start..end, .., .., ..]).assign(&recon);
        let mut eps = Array4::zeros(mu.raw_dim());
        for i in 0..(end - start) {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seeding::mix(eps_seed, (start + i) as u64));
            eps.index_axis_mut(Axis(0), i)
                .mapv_inplace(|_| rng.sample(rand_distr::StandardNormal));
        }
        let z = crate::vae::reparameterize(&mu, &logvar, &eps).map_err(PipelineError::Vae)?;
        let sampled = vae.decode(&z).map_err(PipelineError::Vae)?;
        xhat_sampled
            .slice_mut(s![start..end, .., .., ..])
            .assign(&sampled);
    }
    Ok((x, xhat_mean, xhat_sampled))
}

fn epoch_summaries(log_path: &Path, steps_per_epoch: usize) -> Vec<EpochSummary> {
    let Ok(text) = std::fs::read_to_string(log_path) else {
        return Vec::new();
    };
    let mut epochs: Vec<EpochSummary> = Vec::new();
    let mut acc = [0.0f64; 6];
    let mut count = 0usize;
    let mut epoch = 0usize;
    for line in text.lines() {
        let Ok(v) = serde_json::from_str::<serde_json::Value>(line) else {
            continue;
        };
        let get = |k: &str| v[k].as_f64().unwrap_or(f64::NAN);
        for (slot, key) in acc.iter_mut().zip([
            "recon",
            "kl",
            "distance",
            "cluster",
            "perceptual",
            "total",
        ]) {
            *slot += get(key);
        }
        count += 1;
        if count == steps_per_epoch {
            let n = count as f64;
            epochs.push(EpochSummary {
                epoch,
                recon: acc[0] / n,
                kl: acc[1] / n,
                distance: acc[2] / n,
                cluster: acc[3] / n,
                perceptual: acc[4] / n,
                total: acc[5] / n,
            });
            acc = [0.0; 6];
            count = 0;
            epoch += 1;
        }
    }
    if count > 0 {
        let n = count as f64;
        epochs.push(EpochSummary {
            epoch,
            recon: acc[0] / n,
            kl: acc[1] / n,
            distance: acc[2] / n,
            cluster: acc[3] / n,
            perceptual: acc[4] / n,
            total: acc[5] / n,
        });
    }
    epochs
}

pub(crate) struct EvalCore {
    pub cluster_model: ClusterModel,
    pub predicted: Vec<Label>,
    pub truth: Vec<Label>,
    pub scores: Vec<f64>,
    pub accuracy: f64,
}

/// k-means on train latents, mapping, and test classification; shared by
/// the public eval and the tests.
pub(crate) fn classify_splits(
    train_latents: &[Vec<f64>],
    train_labels: &[Label],
    test_latents: &[Vec<f64>],
    test_labels: &[Label],
    seed: u64,
) -> PipeResult<EvalCore> {
    let model = kmeans_fit(train_latents, 2, seed)?;
    let model = map_clusters_to_labels(model, train_latents, train_labels)?;
    let mapping = model
        .cluster_to_label
        .as_ref()
        .expect("mapped above")
        .clone();
    let normal_centroid = mapping
        .iter()
        .position(|&l| l == Label::Normal)
        .map(|i| model.centroids[i].clone())
        .unwrap_or_else(|| model.centroids[0].clone());
    let mut predicted = Vec::with_capacity(test_latents.len());
    let mut scores = Vec::with_capacity(test_latents.len());
    for p in test_latents {
        predicted.push(classify(&model, p)?);
        scores.push(euclidean(p, &normal_centroid));
    }
    let correct = predicted
        .iter()
        .zip(test_labels.iter())
        .filter(|(p, t)| p == t)
        .count();
    let accuracy = correct as f64 / test_labels.len().max(1) as f64;
    Ok(EvalCore {
        cluster_model: model,
        predicted,
        truth: test_labels.to_vec(),
        scores,
        accuracy,
    })
}

/// Full evaluation of a checkpoint. The dataset comes from the config
/// embedded in the checkpoint unless `manifest_override` points at an
/// explicit (split-tagged) manifest. Artifacts land next to the checkpoint
/// unless `out_dir` overrides.
pub fn cmd_eval(
    checkpoint_path: &Path,
    manifest_override: Option<&Path>,
    out_dir: Option<&Path>,
) -> PipeResult<EvalOutcome> {
    let started = std::time::Instant::now();
    let ckpt = load_checkpoint(checkpoint_path).map_err(PipelineError::Vae)?;
    let mut config: ExperimentConfig = serde_json::from_value(ckpt.extra["config"].clone())
        .map_err(|e| PipelineError::Config(format!("checkpoint has no embedded config: {e}")))?;
    if let Some(m) = manifest_override {
        config.data.manifest = Some(m.to_path_buf());
    }
    let config = config.normalized()?;
    let hash = config_hash(&config)?;
    let run_dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| {
            checkpoint_path
                .parent()
                .unwrap_or(Path::new("."))
                .to_path_buf()
        });
    std::fs::create_dir_all(&run_dir).map_err(|e| PipelineError::Io {
        path: run_dir.clone(),
        source: e,
    })?;
    // the stored config must hash to the same value
    let stored = run_dir.join("config.toml");
    if stored.exists() {
        let text = std::fs::read_to_string(&stored).map_err(|e| PipelineError::Io {
            path: stored.clone(),
            source: e,
        })?;
        let stored_cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("stored config parse: {e}")))?;
        let stored_hash = config_hash(&stored_cfg)?;
        if manifest_override.is_none() && stored_hash != hash {
            return Err(PipelineError::Config(format!(
                "stored config hash {stored_hash} does not match checkpoint config {hash}"
            )));
        }
    }

    let splits: DatasetSplits = prepare_data(&config)?;
    if splits.test.is_empty() || splits.train.is_empty() {
        return Err(PipelineError::Data2(
            "evaluation needs nonempty train and test splits".into(),
        ));
    }
    let vae = ckpt.vae;

    let train_latents = encode_latents(&vae, &splits.train)?;
    let test_latents = encode_latents(&vae, &splits.test)?;
    let train_labels: Vec<Label> = splits.train.iter().map(|s| s.label).collect();
    let test_labels: Vec<Label> = splits.test.iter().map(|s| s.label).collect();

    let core = classify_splits(
        &train_latents,
        &train_labels,
        &test_latents,
        &test_labels,
        config.seeds.model,
    )?;
    let (tpr, fpr) = tpr_fpr(&core.predicted, &core.truth)?;
    let roc = roc_curve(&core.scores, &core.truth)?;
    let train_predicted: Vec<Label> = train_latents
        .iter()
        .map(|p| classify(&core.cluster_model, p))
        .collect::<Result<_, _>>()?;
    let (train_tpr, train_fpr) = tpr_fpr(&train_predicted, &train_labels)?;

    // reconstruction quality on the test split
    let (x_test, xhat_mean, xhat_sampled) =
        reconstruct(&vae, &splits.test, config.seeds.data)?;
    let mse = reconstruction_loss(&x_test, &xhat_mean)?;
    let backbone = PerceptualBackbone::new(config.seeds.backbone);
    let rgb = |t: &Array4<f64>| t.slice(s![.., 0..3, .., ..]).to_owned();
    let fid_value = fid(&rgb(&x_test), &rgb(&xhat_sampled), &backbone)?;

    // PCA scatter over train + test latents
    let mut all_latents = train_latents.clone();
    all_latents.extend(test_latents.iter().cloned());
    let (_, points) = pca_fit_project(&all_latents)?;
    let all_samples: Vec<&ImageSample> =
        splits.train.iter().chain(splits.test.iter()).collect();
    let mut rows = Vec::with_capacity(all_samples.len());
    for ((sample, latent), (pc1, pc2)) in all_samples
        .iter()
        .zip(all_latents.iter())
        .zip(points.iter())
    {
        rows.push(ScatterRow {
            id: sample.id.clone(),
            pc1: *pc1,
            pc2: *pc2,
            true_label: sample.label,
            predicted_label: classify(&core.cluster_model, latent)?,
            dataset: sample.dataset.clone(),
        });
    }
    let scatter_path = run_dir.join("scatter.csv");
    write_scatter_csv(&scatter_path, &rows)?;

    let roc_path = run_dir.join("roc.csv");
    write_roc_csv(&roc_path, &roc)?;

    // discrepancy score statistics per dataset tag, over the test split
    let provider = make_provider(&config);
    let mut by_dataset: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for sample in &splits.test {
        let base = if sample.channels() == 4 {
            crate::discrepancy::strip_fourth_channel(sample)?
        } else {
            sample.clone()
        };
        let d = provider.discrepancy_for(&base)?;
        by_dataset
            .entry(sample.dataset.clone())
            .or_default()
            .push(mean_anomaly_score(&d));
    }
    let mut stat_rows = Vec::new();
    for (dataset, scores) in &by_dataset {
        stat_rows.push(DatasetScoreRow {
            dataset: dataset.clone(),
            n: scores.len(),
            stats: score_distribution_stats(scores)?,
        });
    }
    let stats_path = run_dir.join("discrepancy_stats.csv");
    write_score_stats_csv(&stats_path, &stat_rows)?;

    let steps_per_epoch = splits.train.len().div_ceil(config.train.batch_size);
    let epochs = epoch_summaries(&run_dir.join("metrics.jsonl"), steps_per_epoch);

    let report = ExperimentReport {
        config_hash: hash.clone(),
        epochs,
        metrics: MetricsReport {
            fid: fid_value,
            mse,
            auroc: roc.auc,
            tpr,
            fpr,
            config_hash: hash,
        },
        cluster_accuracy: core.accuracy,
        train_tpr,
        train_fpr,
        n_train: splits.train.len(),
        n_test: splits.test.len(),
        scatter_path: scatter_path.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let report_path = run_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    std::fs::write(&report_path, json).map_err(|e| PipelineError::Io {
        path: report_path.clone(),
        source: e,
    })?;

    Ok(EvalOutcome {
        report,
        report_path,
        roc_path,
        scatter_path,
        stats_path,
        roc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_through_json() {
        let report = ExperimentReport {
            config_hash: "abc".into(),
            epochs: vec![EpochSummary {
                epoch: 0,
                recon: 0.5,
                kl: 1.0,
                distance: -0.25,
                cluster: 0.0,
                perceptual: 0.125,
                total: 0.75,
            }],
            metrics: MetricsReport {
                fid: 1.5,
                mse: 0.01,
                auroc: 0.9,
                tpr: 0.8,
                fpr: 0.1,
                config_hash: "abc".into(),
            },
            cluster_accuracy: 0.95,
            train_tpr: 1.0,
            train_fpr: 0.0,
            n_train: 10,
            n_test: 4,
            scatter_path: PathBuf::from("scatter.csv"),
            wall_clock_seconds: 1.25,
        };
        let json = serde_json::to_string(&report).unwrap();
        let back: ExperimentReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn missing_checkpoint_is_explicit() {
        match cmd_eval(Path::new("/nonexistent/x.ckpt"), None, None) {
            Err(e) => assert_eq!(e.exit_code(), 2),
            Ok(_) => panic!("expected an error"),
        }
    }

    #[test]
    fn classify_splits_on_separated_latents() {
        let train: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                if i < 10 {
                    vec![-3.0 + 0.01 * i as f64, 0.0]
                } else {
                    vec![3.0 + 0.01 * i as f64, 0.0]
                }
            })
            .collect();
        let train_labels: Vec<Label> = (0..20)
            .map(|i| if i < 10 { Label::Normal } else { Label::Anomaly })
            .collect();
        let test = vec![vec![-2.9, 0.1], vec![3.2, -0.1]];
        let test_labels = vec![Label::Normal, Label::Anomaly];
        let core =
            classify_splits(&train, &train_labels, &test, &test_labels, 0).unwrap();
        assert_eq!(core.accuracy, 1.0);
        assert!(core.scores[0] < core.scores[1]);
    }
}
