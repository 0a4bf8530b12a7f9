//! The training loop: adaptive-moment optimization with linear
//! learning-rate decay, per-step loss logging, epoch-frozen cluster means,
//! checkpointing, and a NaN abort guard.

use super::config::{config_hash, ExperimentConfig};
use super::data::prepare_data;
use super::step::{composite_forward_backward, CompositeBatch, CompositeSetup};
use super::{PipeResult, PipelineError};
use crate::clustering::kmeans_fit;
use crate::datamodel::{ImageSample, Label};
use crate::losses::PerceptualBackbone;
use crate::seeding;
use crate::vae::{PriorSet, Vae};
use ndarray::{Array2, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint_path: PathBuf,
    pub metrics_log_path: PathBuf,
    pub steps: u64,
}

/// Adaptive moment estimation over the flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    fn step(&mut self, vae: &mut Vae, grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0usize;
        vae.visit_params(&mut |_, slice| {
            for p in slice.iter_mut() {
                let g = grad[off];
                m[off] = b1 * m[off] + (1.0 - b1) * g;
                v[off] = b2 * v[off] + (1.0 - b2) * g * g;
                let mhat = m[off] / bc1;
                let vhat = v[off] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
                off += 1;
            }
        });
        debug_assert_eq!(off, grad.len());
    }
}

#[derive(Serialize)]
struct StepRecord {
    step: u64,
    recon: f64,
    kl: f64,
    distance: f64,
    cluster: f64,
    perceptual: f64,
    total: f64,
}

fn stack_batch(samples: &[&ImageSample]) -> Array4<f64> {
    let (c, h, w) = samples[0].pixels.dim();
    let mut batch = Array4::zeros((samples.len(), c, h, w));
    for (i, s) in samples.iter().enumerate() {
        batch.index_axis_mut(Axis(0), i).assign(&s.pixels);
    }
    batch
}

/// Per-epoch batch plan: indices into the training set.
fn plan_batches(
    train: &[ImageSample],
    batch_size: usize,
    anomaly_fraction: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let n = train.len();
    match anomaly_fraction {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order.chunks(batch_size).map(|c| c.to_vec()).collect()
        }
        Some(f) => {
            let anomalies: Vec<usize> = (0..n)
                .filter(|&i| train[i].label == Label::Anomaly)
                .collect();
            let normals: Vec<usize> = (0..n)
                .filter(|&i| train[i].label == Label::Normal)
                .collect();
            if anomalies.is_empty() || normals.is_empty() {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(rng);
                return order.chunks(batch_size).map(|c| c.to_vec()).collect();
            }
            let n_batches = n.div_ceil(batch_size);
            let anoms_per_batch = ((batch_size as f64 * f).round() as usize).min(batch_size);
            let mut norm_order = normals.clone();
            norm_order.shuffle(rng);
            let mut norm_cursor = 0usize;
            (0..n_batches)
                .map(|_| {
                    let mut batch = Vec::with_capacity(batch_size);
                    for _ in 0..anoms_per_batch {
                        // anomalies drawn with replacement to hit the fraction
                        batch.push(anomalies[rng.random_range(0..anomalies.len())]);
                    }
                    while batch.len() < batch_size {
                        batch.push(norm_order[norm_cursor % norm_order.len()]);
                        norm_cursor += 1;
                    }
                    batch
                })
                .collect()
        }
    }
}

/// Frozen per-epoch cluster state for the cluster loss: the assigned
/// centroid per training-set index.
struct ClusterState {
    assigned: Vec<Vec<f64>>,
}

fn refresh_cluster_state(
    vae: &Vae,
    train: &[ImageSample],
    seed: u64,
    chunk: usize,
) -> PipeResult<Option<ClusterState>> {
    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(train.len());
    for group in train.chunks(chunk) {
        let refs: Vec<&ImageSample> = group.iter().collect();
        let batch = stack_batch(&refs);
        let (mu, _) = vae.encode(&batch)?;
        for i in 0..group.len() {
            latents.push(mu.index_axis(Axis(0), i).iter().copied().collect());
        }
    }
    let model = match kmeans_fit(&latents, 2, seed) {
        Ok(m) => m,
        // degenerate latents (fewer than k distinct points) leave the
        // cluster term inactive for this epoch
        Err(_) => return Ok(None),
    };
    let assigned = latents
        .iter()
        .map(|p| {
            let d0: f64 = p
                .iter()
                .zip(&model.centroids[0])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d1: f64 = p
                .iter()
                .zip(&model.centroids[1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            model.centroids[usize::from(d1 < d0)].clone()
        })
        .collect();
    Ok(Some(ClusterState { assigned }))
}

/// Trains the model described by the config and writes the run directory:
/// resolved config, per-step metrics log, and checkpoints. A non-finite
/// loss or parameter aborts with the last good checkpoint retained.
pub fn cmd_train(config: &ExperimentConfig) -> PipeResult<TrainOutcome> {
    let config = config.normalized()?;
    let hash = config_hash(&config)?;
    let run_dir = config.output_dir.join(&hash);
    std::fs::create_dir_all(&run_dir).map_err(|e| PipelineError::Io {
        path: run_dir.clone(),
        source: e,
    })?;
    std::fs::write(run_dir.join("config.toml"), config.to_toml()?).map_err(|e| {
        PipelineError::Io {
            path: run_dir.join("config.toml"),
            source: e,
        }
    })?;

    let splits = prepare_data(&config)?;
    let train_set = &splits.train;
    if train_set.is_empty() {
        return Err(PipelineError::Data2("training split is empty".into()));
    }

    let mut vae = Vae::new(config.vae.clone()).map_err(PipelineError::Vae)?;
    let priors = PriorSet::symmetric(config.vae.latent_channels, config.priors.delta);
    let backbone = config
        .ablation
        .use_perceptual_loss
        .then(|| PerceptualBackbone::new(config.seeds.backbone));
    let n_params = vae.param_count();
    let mut adam = Adam::new(
        n_params,
        config.train.adam_beta1,
        config.train.adam_beta2,
        config.train.adam_epsilon,
    );

    let metrics_log_path = run_dir.join("metrics.jsonl");
    let log_file = std::fs::File::create(&metrics_log_path).map_err(|e| PipelineError::Io {
        path: metrics_log_path.clone(),
        source: e,
    })?;
    let mut log = std::io::BufWriter::new(log_file);

    let checkpoint_path = run_dir.join("checkpoint.ckpt");
    let config_json =
        serde_json::to_value(&config).map_err(|e| PipelineError::Config(e.to_string()))?;
    let extra = serde_json::json!({ "config": config_json });
    let save = |vae: &Vae, path: &PathBuf| -> PipeResult<()> {
        crate::vae::save_checkpoint(path, vae, &priors, extra.clone())
            .map_err(PipelineError::Vae)
    };

    let steps_per_epoch = train_set.len().div_ceil(config.train.batch_size) as u64;
    let total_steps = steps_per_epoch * config.train.epochs as u64;
    let mut global_step: u64 = 0;
    let latent_len = config.vae.latent_len();
    let mut last_good_step = None;

    for epoch in 0..config.train.epochs {
        let cluster_state = if config.ablation.use_cluster_loss {
            refresh_cluster_state(
                &vae,
                train_set,
                seeding::mix(config.seeds.model, 0x5000 + epoch as u64),
                config.train.batch_size.max(16),
            )?
        } else {
            None
        };

        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(seeding::mix(config.seeds.data, 0x600 + epoch as u64));
        let batches = plan_batches(
            train_set,
            config.train.batch_size,
            config.train.batch_anomaly_fraction,
            &mut epoch_rng,
        );

        for batch_indices in &batches {
            let samples: Vec<&ImageSample> =
                batch_indices.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
            let b = samples.len();
            let x = stack_batch(&samples);

            let enc_seeds = Vae::phase_seeds(config.seeds.model, global_step, 0, b);
            let dec_seeds = Vae::phase_seeds(config.seeds.model, global_step, 1, b);
            let eps_seeds = Vae::phase_seeds(config.seeds.model, global_step, 2, b);
            let latent = vae.spec().latent_dim();
            let mut eps = Array4::zeros((b, latent.0, latent.1, latent.2));
            for (i, &seed) in eps_seeds.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                eps.index_axis_mut(Axis(0), i)
                    .mapv_inplace(|_| rng.sample(StandardNormal));
            }

            let cluster_means = cluster_state.as_ref().map(|state| {
                Array2::from_shape_fn((b, latent_len), |(i, j)| {
                    state.assigned[batch_indices[i]][j]
                })
            });
            let setup = CompositeSetup {
                vae: &vae,
                priors: &priors,
                backbone: backbone.as_ref(),
                weights: config.loss.weights,
                switches: config.ablation,
                distance_cap: config.loss.distance_cap,
            };
            let step_batch = CompositeBatch {
                x: &x,
                labels: &labels,
                eps: &eps,
                cluster_means: cluster_means.as_ref(),
                enc_seeds: Some(&enc_seeds),
                dec_seeds: Some(&dec_seeds),
            };
            // a non-finite component is a numerical abort, not a usage error
            let (breakdown, grad) = match composite_forward_backward(&setup, &step_batch) {
                Ok(r) => r,
                Err(PipelineError::Loss(crate::losses::LossError::NonFinite(_))) => {
                    if vae.params_finite() {
                        let _ = save(&vae, &run_dir.join("checkpoint-lastgood.ckpt"));
                    }
                    return Err(PipelineError::NumericAbort {
                        step: global_step,
                        last_good_step,
                    });
                }
                Err(e) => return Err(e),
            };

            let record = StepRecord {
                step: global_step,
                recon: breakdown.recon,
                kl: breakdown.kl,
                distance: breakdown.distance,
                cluster: breakdown.cluster,
                perceptual: breakdown.perceptual,
                total: breakdown.total,
            };
            let line =
                serde_json::to_string(&record).map_err(|e| PipelineError::Config(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| PipelineError::Io {
                path: metrics_log_path.clone(),
                source: e,
            })?;

            if !breakdown.total.is_finite() {
                if vae.params_finite() {
                    let _ = save(&vae, &run_dir.join("checkpoint-lastgood.ckpt"));
                }
                return Err(PipelineError::NumericAbort {
                    step: global_step,
                    last_good_step,
                });
            }

            let lr = if config.train.lr_linear_decay {
                config.train.learning_rate * (1.0 - global_step as f64 / total_steps as f64)
            } else {
                config.train.learning_rate
            };
            adam.step(&mut vae, &grad, lr);
            vae.step += 1;
            if !vae.params_finite() {
                return Err(PipelineError::NumericAbort {
                    step: global_step,
                    last_good_step,
                });
            }
            last_good_step = Some(global_step);
            global_step += 1;
        }

        let interval = config.train.checkpoint_interval_epochs;
        if interval > 0 && (epoch + 1) % interval == 0 {
            save(&vae, &run_dir.join(format!("checkpoint-epoch{:04}.ckpt", epoch + 1)))?;
        }
    }

    log.flush().map_err(|e| PipelineError::Io {
        path: metrics_log_path.clone(),
        source: e,
    })?;
    save(&vae, &checkpoint_path)?;
    Ok(TrainOutcome {
        run_dir,
        checkpoint_path,
        metrics_log_path,
        steps: global_step,
    })
}
