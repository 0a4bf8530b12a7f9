//! Bilinear image downsampling.

use super::{DataError, DataResult};
use ndarray::Array3;

/// Downsamples a `C×H×W` image to `target = (h, w)` by bilinear
/// interpolation with half-pixel-centered sampling. Upscaling is rejected.
///
/// Output values are convex combinations of input values, so the output
/// range stays within the input range. An exact 2× reduction averages each
/// aligned 2×2 block.
pub fn downsample_image(pixels: &Array3<f64>, target: (usize, usize)) -> DataResult<Array3<f64>> {
    let (c, h, w) = pixels.dim();
    let (th, tw) = target;
    if th > h || tw > w || th == 0 || tw == 0 {
        return Err(DataError::Upscale {
            from: (h, w),
            target,
        });
    }
    if (th, tw) == (h, w) {
        return Ok(pixels.clone());
    }
    let scale_y = h as f64 / th as f64;
    let scale_x = w as f64 / tw as f64;
    let mut out = Array3::zeros((c, th, tw));
    for oy in 0..th {
        let sy = (oy as f64 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor().clamp(0.0, (h - 1) as f64) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64).clamp(0.0, 1.0);
        for ox in 0..tw {
            let sx = (ox as f64 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor().clamp(0.0, (w - 1) as f64) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            for ch in 0..c {
                let top = pixels[[ch, y0, x0]] * (1.0 - fx) + pixels[[ch, y0, x1]] * fx;
                let bot = pixels[[ch, y1, x0]] * (1.0 - fx) + pixels[[ch, y1, x1]] * fx;
                out[[ch, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Downsamples a binary mask by nearest-neighbor sampling at half-pixel
/// centers, preserving binarity. Upscaling is rejected.
pub fn downsample_mask(mask: &ndarray::Array2<u8>, target: (usize, usize)) -> DataResult<ndarray::Array2<u8>> {
    let (h, w) = mask.dim();
    let (th, tw) = target;
    if th > h || tw > w || th == 0 || tw == 0 {
        return Err(DataError::Upscale {
            from: (h, w),
            target,
        });
    }
    if (th, tw) == (h, w) {
        return Ok(mask.clone());
    }
    let scale_y = h as f64 / th as f64;
    let scale_x = w as f64 / tw as f64;
    let mut out = ndarray::Array2::zeros((th, tw));
    for oy in 0..th {
        let sy = (((oy as f64 + 0.5) * scale_y - 0.5).round().max(0.0) as usize).min(h - 1);
        for ox in 0..tw {
            let sx = (((ox as f64 + 0.5) * scale_x - 0.5).round().max(0.0) as usize).min(w - 1);
            out[[oy, ox]] = mask[[sy, sx]];
        }
    }
    Ok(out)
}
