//! Encoder and decoder assembly.
//!
//! The encoder runs `[conv stride-2 → RRelu → ResBlock]` per stage, an
//! optional extra average-pool after the second stage, and a 1×1 head
//! producing 2z channels split into (mu, logvar). The decoder mirrors it
//! with nearest-neighbor upsampling and ends in a logistic squashing to
//! keep reconstructions in [0, 1].

use super::layers::*;
use super::{VaeSpec, LATENT_SIDE};
use ndarray::{concatenate, s, Array3, Axis};
use rand_chacha::ChaCha8Rng;

pub(crate) struct Stage {
    pub down: Conv2d,
    pub res: ResBlock,
}

pub(crate) struct StageCache {
    down_in: Array3<f64>,
    slopes: Array3<f64>,
    res: ResCache,
}

pub(crate) struct EncSampleCache {
    stages: Vec<StageCache>,
    head_in: Array3<f64>,
}

pub(crate) struct Encoder {
    pub stages: Vec<Stage>,
    pub pool_after: Option<usize>,
    pub head: Conv2d,
    lower: f64,
    upper: f64,
    latent_channels: usize,
}

impl Encoder {
    pub fn new(spec: &VaeSpec, rng: &mut ChaCha8Rng, slots: &mut SlotCounter) -> Self {
        let widths = &spec.stage_widths;
        let mut stages = Vec::with_capacity(widths.len());
        let mut in_ch = spec.input_channels;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(Stage {
                down: Conv2d::new(format!("enc.s{i}.down"), in_ch, w, 3, 2, 1, rng, slots),
                res: ResBlock::new(
                    &format!("enc.s{i}.res"),
                    w,
                    spec.rrelu_lower,
                    spec.rrelu_upper,
                    rng,
                    slots,
                ),
            });
            in_ch = w;
        }
        let head = Conv2d::new(
            "enc.head",
            *widths.last().expect("validated nonempty"),
            2 * spec.latent_channels,
            1,
            1,
            0,
            rng,
            slots,
        );
        Encoder {
            stages,
            pool_after: spec.extra_pooling.then_some(1),
            head,
            lower: spec.rrelu_lower,
            upper: spec.rrelu_upper,
            latent_channels: spec.latent_channels,
        }
    }

    pub fn forward_sample(
        &self,
        x: Array3<f64>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array3<f64>, Array3<f64>, EncSampleCache) {
        let mut cur = x;
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let down_in = cur;
            let h = stage.down.forward(&down_in);
            let (act, slopes) = rrelu_forward(&h, self.lower, self.upper, rng.as_deref_mut());
            let (out, res) = stage.res.forward(act, rng.as_deref_mut());
            stage_caches.push(StageCache {
                down_in,
                slopes,
                res,
            });
            cur = out;
            if self.pool_after == Some(i) {
                cur = avgpool2x_forward(&cur);
            }
        }
        let head_in = cur;
        let out = self.head.forward(&head_in);
        let z = self.latent_channels;
        let mu = out.slice(s![0..z, .., ..]).to_owned();
        let logvar = out.slice(s![z..2 * z, .., ..]).to_owned();
        (
            mu,
            logvar,
            EncSampleCache {
                stages: stage_caches,
                head_in,
            },
        )
    }

    pub fn backward_sample(
        &self,
        cache: &EncSampleCache,
        dmu: &Array3<f64>,
        dlogvar: &Array3<f64>,
        gbuf: &mut GradBuf,
    ) -> Array3<f64> {
        let dout = concatenate(Axis(0), &[dmu.view(), dlogvar.view()]).expect("latent grads");
        let mut d = self.head.backward(&cache.head_in, &dout, gbuf);
        for (i, stage) in self.stages.iter().enumerate().rev() {
            if self.pool_after == Some(i) {
                d = avgpool2x_backward(&d);
            }
            let sc = &cache.stages[i];
            d = stage.res.backward(&sc.res, &d, gbuf);
            d = rrelu_backward(&sc.slopes, &d);
            d = stage.down.backward(&sc.down_in, &d, gbuf);
        }
        d
    }

    pub fn visit<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut [f64])) {
        for stage in &mut self.stages {
            stage.down.visit(f);
            stage.res.visit(f);
        }
        self.head.visit(f);
    }

    pub fn visit_ref(&self, f: &mut impl FnMut(&str, &[usize], &[f64])) {
        for stage in &self.stages {
            stage.down.visit_ref(f);
            stage.res.visit_ref(f);
        }
        self.head.visit_ref(f);
    }
}

pub(crate) struct Unit {
    pub conv: Conv2d,
    pub res: ResBlock,
}

struct UnitCache {
    conv_in: Array3<f64>,
    slopes: Array3<f64>,
    res: ResCache,
}

pub(crate) struct DecSampleCache {
    head_in: Array3<f64>,
    head_slopes: Array3<f64>,
    head_res: ResCache,
    units: Vec<UnitCache>,
    final_in: Array3<f64>,
    sig_out: Array3<f64>,
}

pub(crate) struct Decoder {
    pub head: Conv2d,
    pub head_res: ResBlock,
    pub units: Vec<Unit>,
    pub final_conv: Conv2d,
    lower: f64,
    upper: f64,
}

impl Decoder {
    pub fn new(spec: &VaeSpec, rng: &mut ChaCha8Rng, slots: &mut SlotCounter) -> Self {
        let widths = &spec.stage_widths;
        let n = widths.len();
        let top = *widths.last().expect("validated nonempty");
        let head = Conv2d::new("dec.head", spec.latent_channels, top, 1, 1, 0, rng, slots);
        let head_res = ResBlock::new(
            "dec.head.res",
            top,
            spec.rrelu_lower,
            spec.rrelu_upper,
            rng,
            slots,
        );
        let pool_after = spec.extra_pooling.then_some(1usize);
        let mut units = Vec::new();
        let mk_unit = |name: String, in_w: usize, out_w: usize, rng: &mut ChaCha8Rng, slots: &mut SlotCounter| Unit {
            conv: Conv2d::new(format!("{name}.conv"), in_w, out_w, 3, 1, 1, rng, slots),
            res: ResBlock::new(
                &format!("{name}.res"),
                out_w,
                spec.rrelu_lower,
                spec.rrelu_upper,
                rng,
                slots,
            ),
        };
        for i in (0..n).rev() {
            let out_w = if i > 0 { widths[i - 1] } else { widths[0] };
            units.push(mk_unit(format!("dec.u{i}"), widths[i], out_w, rng, slots));
            // mirror of the encoder's extra pool: one more upsampling unit
            // right after undoing the stage that followed the pool
            if i >= 1 && pool_after == Some(i - 1) {
                units.push(mk_unit(
                    format!("dec.unpool{i}"),
                    widths[i - 1],
                    widths[i - 1],
                    rng,
                    slots,
                ));
            }
        }
        let final_conv = Conv2d::new(
            "dec.final",
            widths[0],
            spec.input_channels,
            3,
            1,
            1,
            rng,
            slots,
        );
        Decoder {
            head,
            head_res,
            units,
            final_conv,
            lower: spec.rrelu_lower,
            upper: spec.rrelu_upper,
        }
    }

    pub fn forward_sample(
        &self,
        z: Array3<f64>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array3<f64>, DecSampleCache) {
        let h = self.head.forward(&z);
        let (act, head_slopes) = rrelu_forward(&h, self.lower, self.upper, rng.as_deref_mut());
        let (mut cur, head_res) = self.head_res.forward(act, rng.as_deref_mut());
        let head_in = z;
        let mut unit_caches = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let conv_in = upsample2x_forward(&cur);
            let h = unit.conv.forward(&conv_in);
            let (act, slopes) = rrelu_forward(&h, self.lower, self.upper, rng.as_deref_mut());
            let (out, res) = unit.res.forward(act, rng.as_deref_mut());
            unit_caches.push(UnitCache {
                conv_in,
                slopes,
                res,
            });
            cur = out;
        }
        let final_in = cur;
        let pre = self.final_conv.forward(&final_in);
        let y = sigmoid_forward(&pre);
        let cache = DecSampleCache {
            head_in,
            head_slopes,
            head_res,
            units: unit_caches,
            final_in,
            sig_out: y.clone(),
        };
        (y, cache)
    }

    /// Backpropagates `dy` (gradient w.r.t. the reconstruction) to the
    /// latent input, accumulating parameter gradients.
    pub fn backward_sample(
        &self,
        cache: &DecSampleCache,
        dy: &Array3<f64>,
        gbuf: &mut GradBuf,
    ) -> Array3<f64> {
        let dpre = sigmoid_backward(&cache.sig_out, dy);
        let mut d = self.final_conv.backward(&cache.final_in, &dpre, gbuf);
        for (unit, uc) in self.units.iter().zip(cache.units.iter()).rev() {
            d = unit.res.backward(&uc.res, &d, gbuf);
            d = rrelu_backward(&uc.slopes, &d);
            d = unit.conv.backward(&uc.conv_in, &d, gbuf);
            d = upsample2x_backward(&d);
        }
        d = self.head_res.backward(&cache.head_res, &d, gbuf);
        d = rrelu_backward(&cache.head_slopes, &d);
        self.head.backward(&cache.head_in, &d, gbuf)
    }

    pub fn visit<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut [f64])) {
        self.head.visit(f);
        self.head_res.visit(f);
        for unit in &mut self.units {
            unit.conv.visit(f);
            unit.res.visit(f);
        }
        self.final_conv.visit(f);
    }

    pub fn visit_ref(&self, f: &mut impl FnMut(&str, &[usize], &[f64])) {
        self.head.visit_ref(f);
        self.head_res.visit_ref(f);
        for unit in &self.units {
            unit.conv.visit_ref(f);
            unit.res.visit_ref(f);
        }
        self.final_conv.visit_ref(f);
    }
}

/// Sanity check used by spec validation: spatial size after all encoder
/// reductions must equal the latent side.
pub(crate) fn expected_image_size(n_stages: usize, extra_pooling: bool) -> usize {
    LATENT_SIDE << (n_stages + usize::from(extra_pooling))
}
