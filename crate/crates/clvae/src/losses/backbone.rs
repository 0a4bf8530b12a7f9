//! Fixed, seeded convolutional backbone for the feature perceptual loss
//! and for FID feature extraction. Weights are drawn once from a dedicated
//! seed and never trained; only input gradients flow through it.
//!
//! Three stride-2 stages with leaky activations; features are tapped after
//! each stage. The backbone accepts exactly 3 channels — a discrepancy
//! fourth channel must be stripped by the caller.

use super::{LossError, LossResult};
use crate::vae::layers::{rrelu_backward, rrelu_forward, Conv2d, GradBuf, SlotCounter};
use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const STAGE_WIDTHS: [usize; 3] = [8, 16, 32];
const LEAKY_SLOPE: f64 = 0.1;

pub struct PerceptualBackbone {
    convs: Vec<Conv2d>,
    n_slots: usize,
    pub seed: u64,
}

impl PerceptualBackbone {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = SlotCounter::default();
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &w) in STAGE_WIDTHS.iter().enumerate() {
            convs.push(Conv2d::new(
                format!("backbone.s{i}"),
                in_ch,
                w,
                3,
                2,
                1,
                &mut rng,
                &mut slots,
            ));
            in_ch = w;
        }
        Self {
            convs,
            n_slots: slots.count(),
            seed,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *STAGE_WIDTHS.last().expect("non-empty")
    }

    fn check_channels(x: &Array3<f64>) -> LossResult<()> {
        let c = x.dim().0;
        if c != 3 {
            return Err(LossError::ChannelCount(c));
        }
        Ok(())
    }

    /// Features after each stage, plus the activation slope multipliers the
    /// backward pass needs.
    fn forward_taps(&self, x: &Array3<f64>) -> (Vec<Array3<f64>>, Vec<Array3<f64>>) {
        let mut taps = Vec::with_capacity(self.convs.len());
        let mut slopes = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            let pre = conv.forward(&cur);
            let (act, slope) = rrelu_forward(&pre, LEAKY_SLOPE, LEAKY_SLOPE, None);
            taps.push(act.clone());
            slopes.push(slope);
            cur = act;
        }
        (taps, slopes)
    }

    /// Tap activations for one 3-channel image.
    pub fn taps(&self, x: &Array3<f64>) -> LossResult<Vec<Array3<f64>>> {
        Self::check_channels(x)?;
        Ok(self.forward_taps(x).0)
    }

    /// Pooled final-tap feature vector (global average per channel); the
    /// embedding FID fits its Gaussians on.
    pub fn pooled_features(&self, x: &Array3<f64>) -> LossResult<Vec<f64>> {
        let taps = self.taps(x)?;
        let last = taps.last().expect("at least one stage");
        Ok(last
            .axis_iter(Axis(0))
            .map(|ch| ch.mean().expect("non-empty feature map"))
            .collect())
    }

    /// Pooled features for a whole batch, row per image.
    pub fn pooled_features_batch(&self, batch: &Array4<f64>) -> LossResult<ndarray::Array2<f64>> {
        let b = batch.dim().0;
        let rows: Vec<LossResult<Vec<f64>>> = (0..b)
            .into_par_iter()
            .map(|i| self.pooled_features(&batch.index_axis(Axis(0), i).to_owned()))
            .collect();
        let mut out = ndarray::Array2::zeros((b, self.feature_dim()));
        for (i, row) in rows.into_iter().enumerate() {
            let row = row?;
            for (j, v) in row.into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        Ok(out)
    }

    /// Backpropagates per-tap gradients to the input image. Backbone
    /// weights stay fixed; their gradient buffers are discarded.
    fn backward_from_taps(
        &self,
        tap_grads: Vec<Array3<f64>>,
        slopes: &[Array3<f64>],
        tap_inputs: &[Array3<f64>],
    ) -> Array3<f64> {
        let mut scratch = GradBuf::new(self.n_slots);
        let mut d: Option<Array3<f64>> = None;
        for i in (0..self.convs.len()).rev() {
            let mut dt = tap_grads[i].clone();
            if let Some(upper) = d {
                dt += &upper;
            }
            let dpre = rrelu_backward(&slopes[i], &dt);
            d = Some(self.convs[i].backward(&tap_inputs[i], &dpre, &mut scratch));
            scratch = GradBuf::new(self.n_slots);
        }
        d.expect("at least one stage")
    }
}

fn tap_mse_and_grad(a: &Array3<f64>, b: &Array3<f64>) -> (f64, Array3<f64>) {
    let n = a.len() as f64;
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        sum += d * d;
    }
    // gradient w.r.t. b
    let grad = (b - a) * (2.0 / n);
    (sum / n, grad)
}

fn sample_loss_and_grad(
    backbone: &PerceptualBackbone,
    x: &Array3<f64>,
    xhat: &Array3<f64>,
) -> LossResult<(f64, Array3<f64>)> {
    PerceptualBackbone::check_channels(x)?;
    PerceptualBackbone::check_channels(xhat)?;
    if x.dim() != xhat.dim() {
        return Err(LossError::ShapeMismatch(
            format!("{:?}", x.dim()),
            format!("{:?}", xhat.dim()),
        ));
    }
    let (taps_x, _) = backbone.forward_taps(x);
    let (taps_hat, slopes) = backbone.forward_taps(xhat);
    let mut loss = 0.0;
    let mut tap_grads = Vec::with_capacity(taps_x.len());
    for (tx, th) in taps_x.iter().zip(taps_hat.iter()) {
        let (l, g) = tap_mse_and_grad(tx, th);
        loss += l;
        tap_grads.push(g);
    }
    // inputs of conv i: the image for stage 0, then the previous tap
    let mut tap_inputs = Vec::with_capacity(taps_hat.len());
    tap_inputs.push(xhat.clone());
    for t in &taps_hat[..taps_hat.len() - 1] {
        tap_inputs.push(t.clone());
    }
    let dxhat = backbone.backward_from_taps(tap_grads, &slopes, &tap_inputs);
    Ok((loss, dxhat))
}

/// Feature perceptual loss: sum over tap layers of the MSE between backbone
/// features of `x` and `xhat`, averaged over the batch. Rejects anything
/// but 3-channel input.
pub fn perceptual_loss(
    backbone: &PerceptualBackbone,
    x: &Array4<f64>,
    xhat: &Array4<f64>,
) -> LossResult<f64> {
    Ok(perceptual_loss_grad(backbone, x, xhat)?.0)
}

/// [`perceptual_loss`] plus its gradient w.r.t. `xhat`.
pub fn perceptual_loss_grad(
    backbone: &PerceptualBackbone,
    x: &Array4<f64>,
    xhat: &Array4<f64>,
) -> LossResult<(f64, Array4<f64>)> {
    if x.dim() != xhat.dim() {
        return Err(LossError::ShapeMismatch(
            format!("{:?}", x.dim()),
            format!("{:?}", xhat.dim()),
        ));
    }
    let b = x.dim().0;
    if b == 0 {
        return Err(LossError::EmptyBatch);
    }
    let per: Vec<LossResult<(f64, Array3<f64>)>> = (0..b)
        .into_par_iter()
        .map(|i| {
            sample_loss_and_grad(
                backbone,
                &x.index_axis(Axis(0), i).to_owned(),
                &xhat.index_axis(Axis(0), i).to_owned(),
            )
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = Array4::zeros(xhat.dim());
    for (i, r) in per.into_iter().enumerate() {
        let (l, g) = r?;
        loss += l;
        grad.index_axis_mut(Axis(0), i).assign(&(&g / b as f64));
    }
    Ok((loss / b as f64, grad))
}
