//! Latent-space anomaly classification with a conditioned VAE.
//!
//! The library trains a residual convolutional VAE whose latent space is
//! pulled toward two class-conditional Gaussian priors (one for normal
//! samples, one for anomalies), optionally fed a discrepancy map as a
//! fourth input channel. At test time images are classified by k-means
//! over their latent codes. Evaluation covers FID, MSE, ROC/AUROC and
//! TPR/FPR, plus PCA exports for latent-space scatter plots.
//!
//! Modules:
//! - [`datamodel`]: samples, manifests, splits, synthetic scene generator
//! - [`vae`]: encoder/decoder, reparameterization, class priors, checkpoints
//! - [`losses`]: reconstruction, conditional KL, distance/cluster/perceptual
//! - [`discrepancy`]: label replacement, discrepancy maps, score statistics
//! - [`clustering`]: k-means classification and PCA projection
//! - [`metrics`]: Fréchet distance, FID, ROC/AUROC, TPR/FPR
//! - [`pipeline`]: experiment configuration, training loop, evaluation, CLI ops

pub mod clustering;
pub mod datamodel;
pub mod discrepancy;
pub mod losses;
pub mod metrics;
pub mod pipeline;
mod seeding;
pub mod vae;
