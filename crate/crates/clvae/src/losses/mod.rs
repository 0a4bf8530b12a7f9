//! Training objectives: reconstruction MSE, class-conditional KL, the
//! cluster-mean distance loss, the k-means cluster loss, the feature
//! perceptual loss, and their weighted sum.
//!
//! Every loss comes with its analytic gradient; the pair is what the
//! gradient test suite checks against central finite differences.

mod backbone;

pub use backbone::{perceptual_loss, perceptual_loss_grad, PerceptualBackbone};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type LossResult<T> = Result<T, LossError>;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(String, String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("expected exactly 3 channels, got {0}")]
    ChannelCount(usize),
}

fn check_same_shape<S: AsRef<[usize]>>(a: S, b: S) -> LossResult<()> {
    if a.as_ref() != b.as_ref() {
        return Err(LossError::ShapeMismatch(
            format!("{:?}", a.as_ref()),
            format!("{:?}", b.as_ref()),
        ));
    }
    Ok(())
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// KL weight β.
    pub beta: f64,
    pub w_distance: f64,
    pub w_cluster: f64,
    pub w_perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.01,
            w_distance: 0.0,
            w_cluster: 0.0,
            w_perceptual: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> LossResult<()> {
        let all = [self.beta, self.w_distance, self.w_cluster, self.w_perceptual];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite("loss weights"));
        }
        if self.beta <= 0.0 || all[1..].iter().any(|&v| v < 0.0) {
            return Err(LossError::NonFinite("loss weights"));
        }
        Ok(())
    }
}

/// Unweighted loss components plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub distance: f64,
    pub cluster: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// Combines unweighted components into the training total:
/// `recon + β·kl + w_d·distance + w_c·cluster + w_p·perceptual`.
pub fn total_loss(
    recon: f64,
    kl: f64,
    distance: f64,
    cluster: f64,
    perceptual: f64,
    weights: &LossWeights,
) -> LossResult<LossBreakdown> {
    let components = [recon, kl, distance, cluster, perceptual];
    if components.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("loss component"));
    }
    let total = recon
        + weights.beta * kl
        + weights.w_distance * distance
        + weights.w_cluster * cluster
        + weights.w_perceptual * perceptual;
    Ok(LossBreakdown {
        recon,
        kl,
        distance,
        cluster,
        perceptual,
        total,
    })
}

/// Mean squared error over all pixels and channels of the batch.
pub fn reconstruction_loss(x: &Array4<f64>, xhat: &Array4<f64>) -> LossResult<f64> {
    check_same_shape(x.shape(), xhat.shape())?;
    let n = x.len() as f64;
    let mut sum = 0.0;
    for (a, b) in x.iter().zip(xhat.iter()) {
        let d = a - b;
        sum += d * d;
    }
    Ok(sum / n)
}

/// Gradient of [`reconstruction_loss`] w.r.t. `xhat`.
pub fn reconstruction_loss_grad(x: &Array4<f64>, xhat: &Array4<f64>) -> LossResult<Array4<f64>> {
    check_same_shape(x.shape(), xhat.shape())?;
    let n = x.len() as f64;
    Ok((xhat - x) * (2.0 / n))
}

/// KL divergence between `N(mu, diag(exp(logvar)))` and the unit-covariance
/// prior centered at `prior_mean`, closed form
/// `½·Σ(exp(logvar) + (mu−m)² − 1 − logvar)`, averaged over the batch.
///
/// `prior_mean` carries each sample's own prior (the label-matched mean).
pub fn kl_divergence(
    mu: &Array4<f64>,
    logvar: &Array4<f64>,
    prior_mean: &Array4<f64>,
) -> LossResult<f64> {
    check_same_shape(mu.shape(), logvar.shape())?;
    check_same_shape(mu.shape(), prior_mean.shape())?;
    if mu.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("kl inputs"));
    }
    let b = mu.dim().0;
    if b == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mut sum = 0.0;
    for ((&m, &lv), &pm) in mu.iter().zip(logvar.iter()).zip(prior_mean.iter()) {
        let d = m - pm;
        sum += lv.exp() + d * d - 1.0 - lv;
    }
    Ok(0.5 * sum / b as f64)
}

/// Gradients of [`kl_divergence`] w.r.t. `mu` and `logvar`.
pub fn kl_divergence_grad(
    mu: &Array4<f64>,
    logvar: &Array4<f64>,
    prior_mean: &Array4<f64>,
) -> LossResult<(Array4<f64>, Array4<f64>)> {
    check_same_shape(mu.shape(), logvar.shape())?;
    check_same_shape(mu.shape(), prior_mean.shape())?;
    let b = mu.dim().0 as f64;
    let dmu = (mu - prior_mean) / b;
    let dlogvar = logvar.mapv(|lv| 0.5 * (lv.exp() - 1.0) / b);
    Ok((dmu, dlogvar))
}

/// Distance loss between the two cluster means: the negated L1 norm of
/// their difference, `−Σ|mu1_i − mu2_i|`. Always ≤ 0; minimizing it pushes
/// the means apart.
pub fn distance_loss(mu1: &[f64], mu2: &[f64]) -> LossResult<f64> {
    if mu1.len() != mu2.len() {
        return Err(LossError::ShapeMismatch(
            format!("[{}]", mu1.len()),
            format!("[{}]", mu2.len()),
        ));
    }
    Ok(-mu1
        .iter()
        .zip(mu2.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>())
}

/// Gradients of [`distance_loss`] w.r.t. both mean vectors
/// (`sign(0)` taken as 0).
pub fn distance_loss_grad(mu1: &[f64], mu2: &[f64]) -> LossResult<(Vec<f64>, Vec<f64>)> {
    if mu1.len() != mu2.len() {
        return Err(LossError::ShapeMismatch(
            format!("[{}]", mu1.len()),
            format!("[{}]", mu2.len()),
        ));
    }
    let d1: Vec<f64> = mu1
        .iter()
        .zip(mu2.iter())
        .map(|(a, b)| -(a - b).signum() * f64::from(u8::from(a != b)))
        .collect();
    let d2: Vec<f64> = d1.iter().map(|v| -v).collect();
    Ok((d1, d2))
}

/// Cluster loss: mean squared distance between each latent and its assigned
/// (frozen) cluster mean, `(1/n)·Σ‖μ_i − z_i‖²`.
pub fn cluster_loss(latents: &Array2<f64>, assigned_means: &Array2<f64>) -> LossResult<f64> {
    check_same_shape(latents.shape(), assigned_means.shape())?;
    let n = latents.dim().0;
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mut sum = 0.0;
    for (z, m) in latents.iter().zip(assigned_means.iter()) {
        let d = m - z;
        sum += d * d;
    }
    Ok(sum / n as f64)
}

/// Gradient of [`cluster_loss`] w.r.t. the latents (means are frozen).
pub fn cluster_loss_grad(
    latents: &Array2<f64>,
    assigned_means: &Array2<f64>,
) -> LossResult<Array2<f64>> {
    check_same_shape(latents.shape(), assigned_means.shape())?;
    let n = latents.dim().0;
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok((latents - assigned_means) * (2.0 / n as f64))
}
