//! Stochastic image augmentations for the SSL views.
//!
//! All randomness comes from the caller's counter-derived RNG, so a view
//! is a pure function of (seed, epoch, sample, view index). Draw order is
//! fixed: flip, crop scale, crop offsets, one jitter factor per channel.

use ndarray::{Array3, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random horizontal flip, random crop resized back to full size, and
/// per-channel intensity jitter. Output stays within [0,1].
pub fn augment_image(img: &ArrayView3<f64>, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = img.to_owned();

    if rng.random_bool(0.5) {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w / 2 {
                    let tmp = out[[ch, y, x]];
                    out[[ch, y, x]] = out[[ch, y, w - 1 - x]];
                    out[[ch, y, w - 1 - x]] = tmp;
                }
            }
        }
    }

    let scale = rng.random_range(0.6..=1.0);
    let ch_rows = ((scale * h as f64).round() as usize).clamp(1, h);
    let cw_cols = ((scale * w as f64).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch_rows);
    let left = rng.random_range(0..=w - cw_cols);
    out = resize_crop(&out, top, left, ch_rows, cw_cols);

    for ch in 0..c {
        let factor = rng.random_range(0.8..=1.2);
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = (out[[ch, y, x]] * factor).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Bilinear resize of the (top, left, rows, cols) crop back to the full
/// image size.
fn resize_crop(img: &Array3<f64>, top: usize, left: usize, rows: usize, cols: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c, h, w));
    for oy in 0..h {
        let sy = ((oy as f64 + 0.5) * rows as f64 / h as f64 - 0.5).clamp(0.0, rows as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let fy = sy - y0 as f64;
        for ox in 0..w {
            let sx =
                ((ox as f64 + 0.5) * cols as f64 / w as f64 - 0.5).clamp(0.0, cols as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let fx = sx - x0 as f64;
            for chan in 0..c {
                let v00 = img[[chan, top + y0, left + x0]];
                let v01 = img[[chan, top + y0, left + x1]];
                let v10 = img[[chan, top + y1, left + x0]];
                let v11 = img[[chan, top + y1, left + x1]];
                out[[chan, oy, ox]] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    out
}
