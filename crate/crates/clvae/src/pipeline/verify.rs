//! Finite-difference verification of the composite objective's analytic
//! gradient, through the full encoder/decoder with every loss term active.
//!
//! The check runs the exact code path the trainer uses (evaluation-mode
//! activations, frozen reparameterization noise and cluster means, so the
//! loss is a deterministic function of the parameters), probes random
//! parameters, and compares against central differences.

use super::config::AblationSwitches;
use super::step::{composite_forward_backward, CompositeBatch, CompositeSetup};
use super::PipeResult;
use crate::datamodel::Label;
use crate::losses::{LossWeights, PerceptualBackbone};
use crate::seeding;
use crate::vae::{PriorSet, Vae, VaeSpec};
use ndarray::{Array2, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct GradProbe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
    pub max_rel_err: f64,
}

/// Compares the composite total-loss gradient against central finite
/// differences on `n_probes` random parameters with step `h`.
pub fn composite_gradient_check(n_probes: usize, h: f64, seed: u64) -> PipeResult<GradCheckReport> {
    // tiny model: every term active, both classes in the batch
    let spec = VaeSpec {
        input_channels: 3,
        latent_channels: 3,
        image_size: 16,
        stage_widths: vec![4, 6],
        seed: seeding::mix(seed, 1),
        ..VaeSpec::default()
    };
    let mut vae = Vae::new(spec.clone())?;
    let priors = PriorSet::symmetric(spec.latent_channels, 2.0);
    let backbone = PerceptualBackbone::new(seeding::mix(seed, 2));
    let weights = LossWeights {
        beta: 0.7,
        w_distance: 0.3,
        w_cluster: 0.4,
        w_perceptual: 0.5,
    };
    let switches = AblationSwitches {
        use_discrepancy: false,
        use_distance_loss: true,
        use_cluster_loss: true,
        use_perceptual_loss: true,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seeding::mix(seed, 3));
    let b = 3;
    let x = Array4::from_shape_fn((b, 3, 16, 16), |_| rng.random_range(0.05..0.95));
    let labels = vec![Label::Normal, Label::Anomaly, Label::Normal];
    let latent_len = spec.latent_len();
    let eps = Array4::from_shape_fn((b, 3, 4, 4), |_| rng.sample(StandardNormal));
    let cluster_means =
        Array2::from_shape_fn((b, latent_len), |_| rng.random_range(-0.5..0.5f64));

    let eval = |vae: &Vae| -> PipeResult<(f64, Vec<f64>)> {
        let setup = CompositeSetup {
            vae,
            priors: &priors,
            backbone: Some(&backbone),
            weights,
            switches,
            distance_cap: 1e9,
        };
        let batch = CompositeBatch {
            x: &x,
            labels: &labels,
            eps: &eps,
            cluster_means: Some(&cluster_means),
            enc_seeds: None,
            dec_seeds: None,
        };
        let (breakdown, grad) = composite_forward_backward(&setup, &batch)?;
        Ok((breakdown.total, grad))
    };

    let (_, grad) = eval(&vae)?;
    let n_params = grad.len();
    let probes_idx = rand::seq::index::sample(&mut rng, n_params, n_probes.min(n_params));
    let mut probes = Vec::with_capacity(probes_idx.len());
    let mut max_rel_err = 0.0f64;
    for idx in probes_idx.iter() {
        vae.nudge_param(idx, h);
        let (fp, _) = eval(&vae)?;
        vae.nudge_param(idx, -2.0 * h);
        let (fm, _) = eval(&vae)?;
        vae.nudge_param(idx, h);
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad[idx];
        let rel_err = (numeric - analytic).abs() / (1.0 + numeric.abs().max(analytic.abs()));
        max_rel_err = max_rel_err.max(rel_err);
        probes.push(GradProbe {
            index: idx,
            analytic,
            numeric,
            rel_err,
        });
    }
    Ok(GradCheckReport {
        probes,
        max_rel_err,
    })
}
