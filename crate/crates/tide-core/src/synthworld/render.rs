//! Image rendering: Gaussian-blob painting driven by morphology features,
//! batch flatfield gain, pixel noise, and intensity preprocessing.
//!
//! Blob positions are a pure function of (batch, channel, blob index), so
//! a noise-free image is a deterministic function of (morphology, batch):
//! exactly the optical-pipeline edge of the causal graph.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};
use crate::rng::derive;

use super::types::MORPH_DIM;
use super::world::World;

const TAG_POS: u64 = 0x06;
const MAX_BLOBS: usize = 12;

/// Smooth multiplicative gain field, fixed per batch:
/// gain(x, y) = 1 + amp * cos(2 pi (u x / w + v y / h) + phase).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Flatfield {
    pub amp: f64,
    pub u: f64,
    pub v: f64,
    pub phase: f64,
}

impl Flatfield {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Flatfield {
            amp: rng.random_range(0.05..0.25),
            u: rng.random_range(0.5..2.0),
            v: rng.random_range(0.5..2.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    pub fn identity() -> Self {
        Flatfield { amp: 0.0, u: 0.0, v: 0.0, phase: 0.0 }
    }

    pub fn gain(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let arg = std::f64::consts::TAU
            * (self.u * x as f64 / w as f64 + self.v * y as f64 / h as f64)
            + self.phase;
        1.0 + self.amp * arg.cos()
    }
}

/// Raw (unclipped) image from morphology features. Per channel ch the
/// blob count, radius, and intensity are affine in m[ch], m[3+ch],
/// m[6+ch] respectively, clamped to sane render ranges.
pub fn paint_image(
    world: &World,
    m: &Array1<f64>,
    batch_idx: usize,
    sigma_i: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f64>> {
    assert_eq!(m.len(), MORPH_DIM, "morphology feature length");
    let (channels, height, width) = world.config.image_shape;
    if batch_idx >= world.flatfields.len() {
        return Err(TideError::domain(format!("unknown batch index {batch_idx}")));
    }
    if channels > 3 {
        return Err(TideError::config("renderer supports at most 3 channels"));
    }
    let field = &world.flatfields[batch_idx];
    let mut img = Array3::zeros((channels, height, width));
    for ch in 0..channels {
        let count = (6.0 + 3.0 * m[ch]).round().clamp(1.0, MAX_BLOBS as f64) as usize;
        let radius = (3.0 + m[3 + ch]).clamp(1.0, 6.0);
        let intensity = (0.8 + 0.5 * m[6 + ch]).clamp(0.05, 2.5);
        let inv_two_r2 = 1.0 / (2.0 * radius * radius);
        for k in 0..count {
            let mut pos_rng = derive(
                world.config.seed,
                &[TAG_POS, batch_idx as u64, ch as u64, k as u64],
            );
            let cx = pos_rng.random_range(0.0..width as f64);
            let cy = pos_rng.random_range(0.0..height as f64);
            for y in 0..height {
                let dy = y as f64 - cy;
                for x in 0..width {
                    let dx = x as f64 - cx;
                    img[[ch, y, x]] += intensity * (-(dx * dx + dy * dy) * inv_two_r2).exp();
                }
            }
        }
        for y in 0..height {
            for x in 0..width {
                img[[ch, y, x]] *= field.gain(x, y, width, height);
                if sigma_i > 0.0 {
                    let eps: f64 = StandardNormal.sample(rng);
                    img[[ch, y, x]] += sigma_i * eps;
                }
            }
        }
    }
    Ok(img)
}

/// Full optical path for one sample: morphology then painting. The same
/// rng drives morphology noise first, pixel noise second.
pub fn render_sample_image(
    world: &World,
    z: &Array1<f64>,
    rna: &Array1<f64>,
    cell: &super::types::CellTypeSpec,
    batch_idx: usize,
    sigma_m: f64,
    sigma_i: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f64>> {
    let m = world.compute_morphology(z, rna, cell, sigma_m, rng);
    paint_image(world, &m, batch_idx, sigma_i, rng)
}

/// Linear-interpolation quantile of a sorted slice, q in [0,1].
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Per-channel: clip to the [0.01%, 99.9%] quantile range, then rescale
/// that range to [0,1]. A (post-clip) constant channel maps to zeros.
pub fn preprocess_image(raw: &Array3<f64>) -> Result<Array3<f64>> {
    let (channels, height, width) = raw.dim();
    if channels == 0 || height == 0 || width == 0 {
        return Err(TideError::domain("cannot preprocess an empty image"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(TideError::domain("image contains non-finite values"));
    }
    let mut out = Array3::zeros((channels, height, width));
    for ch in 0..channels {
        let mut pixels: Vec<f64> = raw
            .index_axis(ndarray::Axis(0), ch)
            .iter()
            .copied()
            .collect();
        pixels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted_quantile(&pixels, 0.0001);
        let hi = sorted_quantile(&pixels, 0.999);
        let span = hi - lo;
        if span <= 1e-12 {
            continue; // constant channel stays all-zero
        }
        for y in 0..height {
            for x in 0..width {
                let v = raw[[ch, y, x]].clamp(lo, hi);
                out[[ch, y, x]] = (v - lo) / span;
            }
        }
    }
    Ok(out)
}
