//! One composite training step: forward through encoder, reparameterize,
//! decode, assemble every enabled loss term, and backpropagate to a flat
//! parameter gradient. Shared verbatim by the training loop and the
//! gradient verification entry point.

use super::config::AblationSwitches;
use super::PipeResult;
use crate::datamodel::Label;
use crate::losses::{
    cluster_loss, cluster_loss_grad, distance_loss, distance_loss_grad, kl_divergence,
    kl_divergence_grad, perceptual_loss_grad, reconstruction_loss, reconstruction_loss_grad,
    total_loss, LossBreakdown, LossWeights, PerceptualBackbone,
};
use crate::vae::{prior_mean_for, reparameterize, PriorSet, Vae};
use ndarray::{s, Array2, Array4, Axis};

pub(crate) struct CompositeSetup<'a> {
    pub vae: &'a Vae,
    pub priors: &'a PriorSet,
    pub backbone: Option<&'a PerceptualBackbone>,
    pub weights: LossWeights,
    pub switches: AblationSwitches,
    pub distance_cap: f64,
}

pub(crate) struct CompositeBatch<'a> {
    pub x: &'a Array4<f64>,
    pub labels: &'a [Label],
    pub eps: &'a Array4<f64>,
    /// Frozen cluster mean per sample (row-aligned), when the cluster loss
    /// is active.
    pub cluster_means: Option<&'a Array2<f64>>,
    /// Per-sample RRelu seeds; `None` runs in evaluation mode.
    pub enc_seeds: Option<&'a [u64]>,
    pub dec_seeds: Option<&'a [u64]>,
}

pub(crate) fn prior_batch(labels: &[Label], priors: &PriorSet) -> Array4<f64> {
    let dim = priors.m_normal.dim();
    let mut out = Array4::zeros((labels.len(), dim.0, dim.1, dim.2));
    for (i, &label) in labels.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(prior_mean_for(label, priors));
    }
    out
}

/// Runs the composite objective and returns the (unweighted) breakdown and
/// the flat parameter gradient of the weighted total.
pub(crate) fn composite_forward_backward(
    setup: &CompositeSetup<'_>,
    batch: &CompositeBatch<'_>,
) -> PipeResult<(LossBreakdown, Vec<f64>)> {
    let vae = setup.vae;
    let w = setup.weights;
    let sw = setup.switches;
    let b = batch.x.dim().0;
    let latent_len = vae.spec().latent_len();

    let (mu, logvar, enc_caches) = vae.encode_cached(batch.x, batch.enc_seeds)?;
    let z = reparameterize(&mu, &logvar, batch.eps)?;
    let (xhat, dec_caches) = vae.decode_cached(&z, batch.dec_seeds)?;

    let recon = reconstruction_loss(batch.x, &xhat)?;
    let mut dxhat = reconstruction_loss_grad(batch.x, &xhat)?;

    let priors_b = prior_batch(batch.labels, setup.priors);
    let kl = kl_divergence(&mu, &logvar, &priors_b)?;
    let (dmu_kl, dlogvar_kl) = kl_divergence_grad(&mu, &logvar, &priors_b)?;

    let mut distance = 0.0;
    let mut dmu_dist: Option<Array4<f64>> = None;
    if sw.use_distance_loss {
        let normal_idx: Vec<usize> = (0..b)
            .filter(|&i| batch.labels[i] == Label::Normal)
            .collect();
        let anom_idx: Vec<usize> = (0..b)
            .filter(|&i| batch.labels[i] == Label::Anomaly)
            .collect();
        if !normal_idx.is_empty() && !anom_idx.is_empty() {
            let class_mean = |idx: &[usize]| -> Vec<f64> {
                let mut m = vec![0.0; latent_len];
                for &i in idx {
                    for (acc, v) in m.iter_mut().zip(mu.index_axis(Axis(0), i).iter()) {
                        *acc += v;
                    }
                }
                for v in &mut m {
                    *v /= idx.len() as f64;
                }
                m
            };
            let m1 = class_mean(&normal_idx);
            let m2 = class_mean(&anom_idx);
            let raw = distance_loss(&m1, &m2)?;
            if raw <= -setup.distance_cap {
                // clamped: constant loss, zero gradient
                distance = -setup.distance_cap;
            } else {
                distance = raw;
                let (d1, d2) = distance_loss_grad(&m1, &m2)?;
                let mut grad = Array4::zeros(mu.raw_dim());
                for (idx_set, dm) in [(&normal_idx, &d1), (&anom_idx, &d2)] {
                    let scale = 1.0 / idx_set.len() as f64;
                    for &i in idx_set.iter() {
                        let mut row = grad.index_axis_mut(Axis(0), i);
                        for (g, dv) in row.iter_mut().zip(dm.iter()) {
                            *g += dv * scale;
                        }
                    }
                }
                dmu_dist = Some(grad);
            }
        }
    }

    let mut cluster = 0.0;
    let mut dz_cluster: Option<Array2<f64>> = None;
    if sw.use_cluster_loss {
        if let Some(means) = batch.cluster_means {
            let z_flat = Array2::from_shape_fn((b, latent_len), |(i, j)| {
                z.index_axis(Axis(0), i)
                    .as_slice()
                    .expect("standard layout")[j]
            });
            cluster = cluster_loss(&z_flat, means)?;
            dz_cluster = Some(cluster_loss_grad(&z_flat, means)?);
        }
    }

    let mut perceptual = 0.0;
    if sw.use_perceptual_loss {
        if let Some(bb) = setup.backbone {
            let rgb = |t: &Array4<f64>| t.slice(s![.., 0..3, .., ..]).to_owned();
            let (p, dp_rgb) = perceptual_loss_grad(bb, &rgb(batch.x), &rgb(&xhat))?;
            perceptual = p;
            let mut slice = dxhat.slice_mut(s![.., 0..3, .., ..]);
            slice.zip_mut_with(&dp_rgb, |a, &g| *a += w.w_perceptual * g);
        }
    }

    let breakdown = total_loss(recon, kl, distance, cluster, perceptual, &w)?;

    // backward
    let mut gbufs = vae.new_gradbufs(b);
    let mut dz = vae.decoder_backward(&dec_caches, &dxhat, &mut gbufs);
    if let Some(dzc) = dz_cluster {
        for i in 0..b {
            let mut row = dz.index_axis_mut(Axis(0), i);
            for (g, dv) in row.iter_mut().zip(dzc.row(i).iter()) {
                *g += w.w_cluster * dv;
            }
        }
    }
    // through the reparameterization into mu and logvar, plus direct terms
    let mut dmu = dz.clone();
    ndarray::Zip::from(&mut dmu)
        .and(&dmu_kl)
        .for_each(|a, &k| *a += w.beta * k);
    if let Some(dd) = dmu_dist {
        ndarray::Zip::from(&mut dmu)
            .and(&dd)
            .for_each(|a, &g| *a += w.w_distance * g);
    }
    let mut dlogvar = Array4::zeros(logvar.raw_dim());
    ndarray::Zip::from(&mut dlogvar)
        .and(&dz)
        .and(batch.eps)
        .and(&logvar)
        .for_each(|out, &dzv, &e, &lv| *out = 0.5 * dzv * e * (lv / 2.0).exp());
    ndarray::Zip::from(&mut dlogvar)
        .and(&dlogvar_kl)
        .for_each(|a, &k| *a += w.beta * k);

    vae.encoder_backward(&enc_caches, &dmu, &dlogvar, &mut gbufs);
    Ok((breakdown, vae.reduce_grads(gbufs)))
}
