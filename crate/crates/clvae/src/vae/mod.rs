//! Conditioned-latent-space VAE: residual encoder/decoder, reparameterized
//! sampling, and the pair of class-conditional Gaussian priors.

pub(crate) mod layers;
mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::datamodel::Label;
use crate::seeding;
use layers::{GradBuf, SlotCounter};
use model::{Decoder, Encoder};
pub(crate) use model::{DecSampleCache, EncSampleCache};
use ndarray::{Array, Array3, Array4, Axis, Dimension};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the spatial latent map; the architecture always
/// bottlenecks to `latent_channels × 4 × 4`.
pub const LATENT_SIDE: usize = 4;

pub type VaeResult<T> = Result<T, VaeError>;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("checkpoint io error at {path}: {source}")]
    CheckpointIo {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u32),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeSpec {
    /// 3 for RGB or 4 with an attached discrepancy channel.
    pub input_channels: usize,
    /// Channel count z of the z×4×4 latent map.
    pub latent_channels: usize,
    /// Input images are square with this side length; must equal
    /// `4 · 2^(stages + extra_pooling)`.
    pub image_size: usize,
    /// Output channels of each stride-2 encoder stage; the decoder mirrors.
    pub stage_widths: Vec<usize>,
    /// RRelu negative-slope bounds; evaluation uses the midpoint.
    pub rrelu_lower: f64,
    pub rrelu_upper: f64,
    /// Inserts one extra average-pool after the second encoder stage
    /// (and a mirrored extra upsampling unit in the decoder).
    pub extra_pooling: bool,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for VaeSpec {
    fn default() -> Self {
        Self {
            input_channels: 3,
            latent_channels: 64,
            image_size: 64,
            stage_widths: vec![16, 32, 64, 128],
            rrelu_lower: 1.0 / 8.0,
            rrelu_upper: 1.0 / 3.0,
            extra_pooling: false,
            seed: 0,
        }
    }
}

impl VaeSpec {
    pub fn validate(&self) -> VaeResult<()> {
        let err = |msg: String| Err(VaeError::BadSpec(msg));
        if self.input_channels != 3 && self.input_channels != 4 {
            return err(format!("input_channels must be 3 or 4, got {}", self.input_channels));
        }
        if self.latent_channels == 0 {
            return err("latent_channels must be positive".into());
        }
        if self.stage_widths.is_empty() || self.stage_widths.iter().any(|&w| w == 0) {
            return err("stage_widths must be nonempty positive integers".into());
        }
        if self.extra_pooling && self.stage_widths.len() < 2 {
            return err("extra_pooling requires at least two stages".into());
        }
        if !(self.rrelu_lower > 0.0 && self.rrelu_lower <= self.rrelu_upper && self.rrelu_upper < 1.0) {
            return err(format!(
                "rrelu bounds ({}, {}) must satisfy 0 < lower <= upper < 1",
                self.rrelu_lower, self.rrelu_upper
            ));
        }
        let expected = model::expected_image_size(self.stage_widths.len(), self.extra_pooling);
        if self.image_size != expected {
            return err(format!(
                "image_size {} incompatible with {} stages{}: expected {}",
                self.image_size,
                self.stage_widths.len(),
                if self.extra_pooling { " + extra pool" } else { "" },
                expected
            ));
        }
        Ok(())
    }

    /// Shape of one latent map.
    pub fn latent_dim(&self) -> (usize, usize, usize) {
        (self.latent_channels, LATENT_SIDE, LATENT_SIDE)
    }

    /// Flattened latent length used by clustering.
    pub fn latent_len(&self) -> usize {
        self.latent_channels * LATENT_SIDE * LATENT_SIDE
    }
}

/// The two class-conditional prior means over the latent space, with an
/// implicit identity covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    pub m_normal: Array3<f64>,
    pub m_anomaly: Array3<f64>,
}

impl PriorSet {
    /// Symmetric priors `±delta` on the first latent channel, all other
    /// channels zero.
    pub fn symmetric(latent_channels: usize, delta: f64) -> Self {
        let mut m_normal = Array3::zeros((latent_channels, LATENT_SIDE, LATENT_SIDE));
        let mut m_anomaly = m_normal.clone();
        m_normal.index_axis_mut(Axis(0), 0).fill(-delta);
        m_anomaly.index_axis_mut(Axis(0), 0).fill(delta);
        Self { m_normal, m_anomaly }
    }
}

/// Returns the prior mean matching a sample's label.
pub fn prior_mean_for(label: Label, priors: &PriorSet) -> &Array3<f64> {
    match label {
        Label::Normal => &priors.m_normal,
        Label::Anomaly => &priors.m_anomaly,
    }
}

/// Reparameterized sample: `z = mu + exp(logvar/2) ⊙ eps`, elementwise.
pub fn reparameterize<D: Dimension>(
    mu: &Array<f64, D>,
    logvar: &Array<f64, D>,
    eps: &Array<f64, D>,
) -> VaeResult<Array<f64, D>> {
    if mu.shape() != logvar.shape() || mu.shape() != eps.shape() {
        return Err(VaeError::ShapeMismatch {
            expected: format!("{:?}", mu.shape()),
            got: format!("{:?} / {:?}", logvar.shape(), eps.shape()),
        });
    }
    let mut z = mu.clone();
    ndarray::Zip::from(&mut z)
        .and(logvar)
        .and(eps)
        .for_each(|z, &lv, &e| *z += (lv / 2.0).exp() * e);
    Ok(z)
}

/// One sample's latent code: posterior mean, log-variance, and the
/// reparameterized draw for the noise recorded at sampling time.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub mu: Array3<f64>,
    pub logvar: Array3<f64>,
    pub sample: Array3<f64>,
}

impl LatentCode {
    pub fn new(mu: Array3<f64>, logvar: Array3<f64>, eps: &Array3<f64>) -> VaeResult<Self> {
        let sample = reparameterize(&mu, &logvar, eps)?;
        Ok(Self { mu, logvar, sample })
    }

    /// Posterior mean flattened in standard (channel-major) order, as used
    /// for clustering.
    pub fn mu_flat(&self) -> Vec<f64> {
        self.mu.iter().copied().collect()
    }
}

/// The model: all encoder/decoder parameters plus its spec and training
/// step counter. The parameter set is mutated only by the training loop;
/// evaluation-mode passes are read-only and safe to run concurrently.
pub struct Vae {
    spec: VaeSpec,
    enc: Encoder,
    dec: Decoder,
    n_slots: usize,
    pub step: u64,
}

impl Vae {
    pub fn new(spec: VaeSpec) -> VaeResult<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut slots = SlotCounter::default();
        let enc = Encoder::new(&spec, &mut rng, &mut slots);
        let dec = Decoder::new(&spec, &mut rng, &mut slots);
        Ok(Self {
            spec,
            enc,
            dec,
            n_slots: slots.count(),
            step: 0,
        })
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params_ref(&mut |_, _, data| n += data.len());
        n
    }

    /// Visits every parameter array mutably, in the canonical order that
    /// gradient buffers and checkpoints use.
    pub(crate) fn visit_params<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut [f64])) {
        self.enc.visit(f);
        self.dec.visit(f);
    }

    pub(crate) fn visit_params_ref(&self, f: &mut impl FnMut(&str, &[usize], &[f64])) {
        self.enc.visit_ref(f);
        self.dec.visit_ref(f);
    }

    /// Adds `delta` to the parameter at `flat_index` (canonical order).
    /// Used by finite-difference verification.
    pub fn nudge_param(&mut self, flat_index: usize, delta: f64) {
        let mut off = 0usize;
        self.visit_params(&mut |_, slice| {
            if flat_index >= off && flat_index < off + slice.len() {
                slice[flat_index - off] += delta;
            }
            off += slice.len();
        });
    }

    pub fn params_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params_ref(&mut |_, _, data| {
            if data.iter().any(|v| !v.is_finite()) {
                ok = false;
            }
        });
        ok
    }

    fn check_input(&self, batch: &Array4<f64>) -> VaeResult<()> {
        let (_, c, h, w) = batch.dim();
        let s = self.spec.image_size;
        if c != self.spec.input_channels || h != s || w != s {
            return Err(VaeError::ShapeMismatch {
                expected: format!("[batch, {}, {s}, {s}]", self.spec.input_channels),
                got: format!("{:?}", batch.dim()),
            });
        }
        Ok(())
    }

    fn check_latent(&self, z: &Array4<f64>) -> VaeResult<()> {
        let (_, c, h, w) = z.dim();
        if (c, h, w) != self.spec.latent_dim() {
            return Err(VaeError::ShapeMismatch {
                expected: format!("[batch, {}, {LATENT_SIDE}, {LATENT_SIDE}]", self.spec.latent_channels),
                got: format!("{:?}", z.dim()),
            });
        }
        Ok(())
    }

    /// Evaluation-mode encoding (RRelu slopes fixed at the midpoint).
    /// Deterministic: a pure function of (params, batch).
    pub fn encode(&self, batch: &Array4<f64>) -> VaeResult<(Array4<f64>, Array4<f64>)> {
        self.check_input(batch)?;
        let b = batch.dim().0;
        let per: Vec<(Array3<f64>, Array3<f64>)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let x = batch.index_axis(Axis(0), i).to_owned();
                let (mu, logvar, _cache) = self.enc.forward_sample(x, None);
                (mu, logvar)
            })
            .collect();
        let (zc, s4) = (self.spec.latent_channels, LATENT_SIDE);
        let mut mu = Array4::zeros((b, zc, s4, s4));
        let mut logvar = Array4::zeros((b, zc, s4, s4));
        for (i, (m, lv)) in per.into_iter().enumerate() {
            mu.index_axis_mut(Axis(0), i).assign(&m);
            logvar.index_axis_mut(Axis(0), i).assign(&lv);
        }
        Ok((mu, logvar))
    }

    /// Evaluation-mode decoding; outputs lie in [0, 1].
    pub fn decode(&self, z: &Array4<f64>) -> VaeResult<Array4<f64>> {
        self.check_latent(z)?;
        let b = z.dim().0;
        let per: Vec<Array3<f64>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let zi = z.index_axis(Axis(0), i).to_owned();
                let (y, _cache) = self.dec.forward_sample(zi, None);
                y
            })
            .collect();
        let s = self.spec.image_size;
        let mut out = Array4::zeros((b, self.spec.input_channels, s, s));
        for (i, y) in per.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&y);
        }
        Ok(out)
    }

    /// Caching encode for the backward pass. `seeds` gives per-sample
    /// RRelu streams (training mode); `None` runs in evaluation mode.
    pub(crate) fn encode_cached(
        &self,
        batch: &Array4<f64>,
        seeds: Option<&[u64]>,
    ) -> VaeResult<(Array4<f64>, Array4<f64>, Vec<EncSampleCache>)> {
        self.check_input(batch)?;
        let b = batch.dim().0;
        if let Some(s) = seeds {
            assert_eq!(s.len(), b);
        }
        let per: Vec<(Array3<f64>, Array3<f64>, EncSampleCache)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let x = batch.index_axis(Axis(0), i).to_owned();
                match seeds {
                    Some(s) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(s[i]);
                        self.enc.forward_sample(x, Some(&mut rng))
                    }
                    None => self.enc.forward_sample(x, None),
                }
            })
            .collect();
        let (zc, s4) = (self.spec.latent_channels, LATENT_SIDE);
        let mut mu = Array4::zeros((b, zc, s4, s4));
        let mut logvar = Array4::zeros((b, zc, s4, s4));
        let mut caches = Vec::with_capacity(b);
        for (i, (m, lv, cache)) in per.into_iter().enumerate() {
            mu.index_axis_mut(Axis(0), i).assign(&m);
            logvar.index_axis_mut(Axis(0), i).assign(&lv);
            caches.push(cache);
        }
        Ok((mu, logvar, caches))
    }

    pub(crate) fn decode_cached(
        &self,
        z: &Array4<f64>,
        seeds: Option<&[u64]>,
    ) -> VaeResult<(Array4<f64>, Vec<DecSampleCache>)> {
        self.check_latent(z)?;
        let b = z.dim().0;
        if let Some(s) = seeds {
            assert_eq!(s.len(), b);
        }
        let per: Vec<(Array3<f64>, DecSampleCache)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let zi = z.index_axis(Axis(0), i).to_owned();
                match seeds {
                    Some(s) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(s[i]);
                        self.dec.forward_sample(zi, Some(&mut rng))
                    }
                    None => self.dec.forward_sample(zi, None),
                }
            })
            .collect();
        let s = self.spec.image_size;
        let mut out = Array4::zeros((b, self.spec.input_channels, s, s));
        let mut caches = Vec::with_capacity(b);
        for (i, (y, cache)) in per.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&y);
            caches.push(cache);
        }
        Ok((out, caches))
    }

    /// Decoder backward over a batch: fills each sample's grad buffer and
    /// returns the gradient w.r.t. the latent batch.
    pub(crate) fn decoder_backward(
        &self,
        caches: &[DecSampleCache],
        dxhat: &Array4<f64>,
        gbufs: &mut [GradBuf],
    ) -> Array4<f64> {
        let b = caches.len();
        let per: Vec<Array3<f64>> = caches
            .par_iter()
            .zip(gbufs.par_iter_mut())
            .enumerate()
            .map(|(i, (cache, gbuf))| {
                let dy = dxhat.index_axis(Axis(0), i).to_owned();
                self.dec.backward_sample(cache, &dy, gbuf)
            })
            .collect();
        let (zc, s4) = (self.spec.latent_channels, LATENT_SIDE);
        let mut dz = Array4::zeros((b, zc, s4, s4));
        for (i, d) in per.into_iter().enumerate() {
            dz.index_axis_mut(Axis(0), i).assign(&d);
        }
        dz
    }

    pub(crate) fn encoder_backward(
        &self,
        caches: &[EncSampleCache],
        dmu: &Array4<f64>,
        dlogvar: &Array4<f64>,
        gbufs: &mut [GradBuf],
    ) {
        caches
            .par_iter()
            .zip(gbufs.par_iter_mut())
            .enumerate()
            .for_each(|(i, (cache, gbuf))| {
                let dm = dmu.index_axis(Axis(0), i).to_owned();
                let dlv = dlogvar.index_axis(Axis(0), i).to_owned();
                self.enc.backward_sample(cache, &dm, &dlv, gbuf);
            });
    }

    /// Sums per-sample flat gradients in sample order. The result aligns
    /// with `visit_params` order.
    pub(crate) fn reduce_grads(&self, gbufs: Vec<GradBuf>) -> Vec<f64> {
        let mut total: Option<Vec<f64>> = None;
        for gbuf in gbufs {
            let flat = gbuf.into_flat();
            match &mut total {
                None => total = Some(flat),
                Some(acc) => {
                    assert_eq!(acc.len(), flat.len());
                    for (a, g) in acc.iter_mut().zip(flat) {
                        *a += g;
                    }
                }
            }
        }
        total.unwrap_or_default()
    }

    pub(crate) fn new_gradbufs(&self, batch: usize) -> Vec<GradBuf> {
        (0..batch).map(|_| GradBuf::new(self.n_slots)).collect()
    }

    /// Derives per-sample noise stream seeds for one forward pass. Each
    /// (step, phase) pair owns an independent stream family.
    pub(crate) fn phase_seeds(base: u64, step: u64, phase: u64, batch: usize) -> Vec<u64> {
        let phase_seed = seeding::mix(base, step * 8 + phase);
        (0..batch as u64).map(|i| seeding::mix(phase_seed, i)).collect()
    }
}
