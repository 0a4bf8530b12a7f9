//! Building blocks for the convolutional encoder/decoder: stride-aware 2D
//! convolution (im2col + GEMM), randomized leaky ReLU, nearest-neighbor
//! upsampling, 2×2 average pooling, and the residual block of
//! conv → RRelu → conv with an additive skip.
//!
//! All math is f64. Forward passes return the caches their backward passes
//! need; backward passes write parameter gradients into a [`GradBuf`] slot
//! per parameter array, so per-sample gradients can be computed in parallel
//! and reduced in a fixed order.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Hands out slot indices for parameter arrays in construction order.
/// Construction order, slot order, and visit order must all agree.
#[derive(Default)]
pub(crate) struct SlotCounter(usize);

impl SlotCounter {
    pub fn next(&mut self) -> usize {
        let s = self.0;
        self.0 += 1;
        s
    }

    pub fn count(&self) -> usize {
        self.0
    }
}

/// Per-sample gradient buffer: one chunk per parameter array.
pub(crate) struct GradBuf {
    chunks: Vec<Vec<f64>>,
}

impl GradBuf {
    pub fn new(n_slots: usize) -> Self {
        Self {
            chunks: vec![Vec::new(); n_slots],
        }
    }

    pub fn set(&mut self, slot: usize, data: Vec<f64>) {
        debug_assert!(self.chunks[slot].is_empty(), "slot {slot} written twice");
        self.chunks[slot] = data;
    }

    /// Flattens chunks in slot order. Unwritten slots contribute nothing,
    /// so every slot must have been filled before calling this.
    pub fn into_flat(self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.chunks.iter().map(Vec::len).sum());
        for chunk in self.chunks {
            flat.extend_from_slice(&chunk);
        }
        flat
    }
}

/// 2D convolution with square kernels, zero padding, and flattened-kernel
/// weight layout `[out_ch, in_ch·k·k]`.
pub(crate) struct Conv2d {
    pub name: String,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub slot_w: usize,
    pub slot_b: usize,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
        slots: &mut SlotCounter,
    ) -> Self {
        // fan-in scaled uniform init, zero bias
        let fan_in = (in_ch * k * k) as f64;
        let bound = fan_in.sqrt().recip();
        let w = Array2::from_shape_fn((out_ch, in_ch * k * k), |_| {
            rng.random_range(-bound..=bound)
        });
        Self {
            name: name.into(),
            w,
            b: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            slot_w: slots.next(),
            slot_b: slots.next(),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, in_dim: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = in_dim;
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let mut dx = Array3::zeros(in_dim);
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[ci, iy as usize, ix as usize]] += dcols[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch, "conv {} channel mismatch", self.name);
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let mut out = self.w.dot(&cols);
        for (mut row, &bias) in out.rows_mut().into_iter().zip(self.b.iter()) {
            row += bias;
        }
        out.into_shape_with_order((self.out_ch, oh, ow))
            .expect("conv output reshape")
    }

    /// Returns `dx`; writes `dw`/`db` into the grad buffer.
    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>, gbuf: &mut GradBuf) -> Array3<f64> {
        let (oc, oh, ow) = dy.dim();
        debug_assert_eq!(oc, self.out_ch);
        let dy2 = dy
            .view()
            .into_shape_with_order((oc, oh * ow))
            .expect("dy reshape");
        let cols = self.im2col(x);
        let dw = dy2.dot(&cols.t());
        let db = dy2.sum_axis(ndarray::Axis(1));
        let dcols = self.w.t().dot(&dy2);
        gbuf.set(self.slot_w, dw.into_raw_vec_and_offset().0);
        gbuf.set(self.slot_b, db.into_raw_vec_and_offset().0);
        self.col2im(&dcols, x.dim())
    }

    pub fn visit<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut [f64])) {
        f(
            &format!("{}.w", self.name),
            self.w.as_slice_mut().expect("standard layout"),
        );
        f(
            &format!("{}.b", self.name),
            self.b.as_slice_mut().expect("standard layout"),
        );
    }

    pub fn visit_ref(&self, f: &mut impl FnMut(&str, &[usize], &[f64])) {
        f(
            &format!("{}.w", self.name),
            &[self.w.dim().0, self.w.dim().1],
            self.w.as_slice().expect("standard layout"),
        );
        f(
            &format!("{}.b", self.name),
            &[self.b.len()],
            self.b.as_slice().expect("standard layout"),
        );
    }
}

/// Randomized leaky ReLU. Training samples the negative-side slope per
/// element from `U[lower, upper]`; evaluation fixes it at the midpoint.
/// Returns the activation and the elementwise gradient multiplier.
pub(crate) fn rrelu_forward(
    x: &Array3<f64>,
    lower: f64,
    upper: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array3<f64>, Array3<f64>) {
    let mid = 0.5 * (lower + upper);
    let mut y = x.clone();
    let mut slopes = Array3::from_elem(x.dim(), 1.0);
    for (v, s) in y.iter_mut().zip(slopes.iter_mut()) {
        if *v <= 0.0 {
            let a = match rng.as_deref_mut() {
                Some(r) => r.random_range(lower..=upper),
                None => mid,
            };
            *s = a;
            *v *= a;
        }
    }
    (y, slopes)
}

pub(crate) fn rrelu_backward(slopes: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    slopes * dy
}

/// Nearest-neighbor 2× upsampling.
pub(crate) fn upsample2x_forward(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub(crate) fn upsample2x_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let mut dx = Array3::zeros((c, h2 / 2, w2 / 2));
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                dx[[ci, y / 2, x / 2]] += dy[[ci, y, x]];
            }
        }
    }
    dx
}

/// 2×2 average pooling with stride 2.
pub(crate) fn avgpool2x_forward(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, xx)| {
        0.25 * (x[[ci, 2 * y, 2 * xx]]
            + x[[ci, 2 * y, 2 * xx + 1]]
            + x[[ci, 2 * y + 1, 2 * xx]]
            + x[[ci, 2 * y + 1, 2 * xx + 1]])
    })
}

pub(crate) fn avgpool2x_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let g = 0.25 * dy[[ci, y, x]];
                dx[[ci, 2 * y, 2 * x]] = g;
                dx[[ci, 2 * y, 2 * x + 1]] = g;
                dx[[ci, 2 * y + 1, 2 * x]] = g;
                dx[[ci, 2 * y + 1, 2 * x + 1]] = g;
            }
        }
    }
    dx
}

pub(crate) fn sigmoid_forward(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub(crate) fn sigmoid_backward(y: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| *d *= yv * (1.0 - yv));
    dx
}

/// conv → RRelu → conv plus an additive skip connection.
pub(crate) struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub lower: f64,
    pub upper: f64,
}

pub(crate) struct ResCache {
    pub x: Array3<f64>,
    pub slopes: Array3<f64>,
    pub mid: Array3<f64>,
}

impl ResBlock {
    pub fn new(
        name: &str,
        ch: usize,
        lower: f64,
        upper: f64,
        rng: &mut ChaCha8Rng,
        slots: &mut SlotCounter,
    ) -> Self {
        Self {
            conv1: Conv2d::new(format!("{name}.conv1"), ch, ch, 3, 1, 1, rng, slots),
            conv2: Conv2d::new(format!("{name}.conv2"), ch, ch, 3, 1, 1, rng, slots),
            lower,
            upper,
        }
    }

    pub fn forward(
        &self,
        x: Array3<f64>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array3<f64>, ResCache) {
        let h = self.conv1.forward(&x);
        let (mid, slopes) = rrelu_forward(&h, self.lower, self.upper, rng);
        let y = self.conv2.forward(&mid) + &x;
        (y, ResCache { x, slopes, mid })
    }

    pub fn backward(&self, cache: &ResCache, dy: &Array3<f64>, gbuf: &mut GradBuf) -> Array3<f64> {
        let dmid = self.conv2.backward(&cache.mid, dy, gbuf);
        let dh = rrelu_backward(&cache.slopes, &dmid);
        let dx_path = self.conv1.backward(&cache.x, &dh, gbuf);
        dx_path + dy
    }

    pub fn visit<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut [f64])) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }

    pub fn visit_ref(&self, f: &mut impl FnMut(&str, &[usize], &[f64])) {
        self.conv1.visit_ref(f);
        self.conv2.visit_ref(f);
    }
}
