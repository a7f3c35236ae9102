//! Dense flow by kernel soft-argmax and keypoint transfer by soft sampling.
//!
//! Coordinates are normalized to `[-1, 1]` on both axes with the corner
//! samples of the grid at the extremes. Grids store `(x, y)` in the last axis.

use crate::error::{ChmError, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftArgmaxConfig {
    /// Standard deviation of the Gaussian mask, in output-grid cells.
    pub gaussian_sigma: f64,
    /// Softmax temperature: scores are divided by it before exponentiation.
    pub temperature: f64,
    /// Soft-sampler radius in normalized units.
    pub tau: f64,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.02;

impl SoftArgmaxConfig {
    /// Defaults for an `n x n` output grid: `sigma = 17 * n / 30`, `tau = 0.1`.
    pub fn for_grid(n: usize) -> Self {
        Self { gaussian_sigma: 17.0 * n as f64 / 30.0, temperature: DEFAULT_TEMPERATURE, tau: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0) || !(self.temperature > 0.0) {
            return Err(ChmError::Config("sigma and temperature must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 2.0) {
            return Err(ChmError::Config(format!("tau = {} outside (0, 2]", self.tau)));
        }
        Ok(())
    }
}

/// Normalized coordinate of grid index `i` on an axis of `n` samples.
#[inline]
pub fn grid_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Regular `[H, W, 2]` grid of `(x, y)` normalized coordinates.
pub fn regular_grid(h: usize, w: usize) -> DenseTensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(grid_coord(j, w));
            data.push(grid_coord(i, h));
        }
    }
    DenseTensor::from_vec(&[h, w, 2], data).expect("nonempty grid")
}

/// Output of [`kernel_softmax`]: the row distributions plus the Gaussian
/// masks that were applied (needed by the backward pass).
#[derive(Clone, Debug)]
pub struct SoftmaxOutput {
    pub probs: DenseTensor,
    /// `[H, W, H, W]`: mask `G^p` of every source row.
    pub masks: DenseTensor,
}

/// For each source cell `(i, j)`: `softmax_{k,l}(G^p_{kl} C_{ijkl} / T)` with
/// `G^p` an unnormalized Gaussian of peak 1 at `p = argmax_{k,l} C_{ijkl}`
/// (ties take the smallest flat index).
pub fn kernel_softmax(c: &DenseTensor, cfg: &SoftArgmaxConfig) -> Result<SoftmaxOutput> {
    if c.rank() != 4 {
        return Err(ChmError::RankMismatch { input: c.rank(), kernel: 4 });
    }
    let (h, w, th, tw) = (c.shape()[0], c.shape()[1], c.shape()[2], c.shape()[3]);
    let row = th * tw;
    let mut probs = vec![0.0; c.len()];
    let mut masks = vec![0.0; c.len()];
    let inv_2s2 = 1.0 / (2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma);
    for r in 0..h * w {
        let scores = &c.data()[r * row..(r + 1) * row];
        let mut p = 0;
        for (n, &v) in scores.iter().enumerate() {
            if v > scores[p] {
                p = n;
            }
        }
        let (py, px) = ((p / tw) as f64, (p % tw) as f64);
        let m = &mut masks[r * row..(r + 1) * row];
        let out = &mut probs[r * row..(r + 1) * row];
        let mut zmax = f64::NEG_INFINITY;
        for n in 0..row {
            let (ky, kx) = ((n / tw) as f64, (n % tw) as f64);
            m[n] = (-((ky - py).powi(2) + (kx - px).powi(2)) * inv_2s2).exp();
            out[n] = m[n] * scores[n] / cfg.temperature;
            zmax = zmax.max(out[n]);
        }
        let mut z = 0.0;
        for v in out.iter_mut() {
            *v = (*v - zmax).exp();
            z += *v;
        }
        out.iter_mut().for_each(|v| *v /= z);
    }
    Ok(SoftmaxOutput {
        probs: DenseTensor::from_vec(c.shape(), probs)?,
        masks: DenseTensor::from_vec(c.shape(), masks)?,
    })
}

/// Backward of [`kernel_softmax`] with the masks held constant.
pub fn kernel_softmax_backward(out: &SoftmaxOutput, grad: &DenseTensor, cfg: &SoftArgmaxConfig) -> DenseTensor {
    let s = out.probs.shape();
    let row = s[2] * s[3];
    let mut g = vec![0.0; grad.len()];
    for r in 0..s[0] * s[1] {
        let p = &out.probs.data()[r * row..(r + 1) * row];
        let gu = &grad.data()[r * row..(r + 1) * row];
        let m = &out.masks.data()[r * row..(r + 1) * row];
        let dot: f64 = p.iter().zip(gu).map(|(a, b)| a * b).sum();
        for n in 0..row {
            g[r * row + n] = p[n] * (gu[n] - dot) * m[n] / cfg.temperature;
        }
    }
    DenseTensor::from_vec(s, g).unwrap()
}

/// Expected target coordinate of every source cell, `[H, W, 2]`.
pub fn form_flow(probs: &DenseTensor, grid: &DenseTensor) -> Result<DenseTensor> {
    let s = probs.shape();
    if probs.rank() != 4 || grid.shape() != [s[2], s[3], 2] {
        return Err(ChmError::ShapeMismatch { expected: vec![s[2], s[3], 2], got: grid.shape().to_vec() });
    }
    let row = s[2] * s[3];
    let g = grid.data();
    let mut out = vec![0.0; s[0] * s[1] * 2];
    for r in 0..s[0] * s[1] {
        let p = &probs.data()[r * row..(r + 1) * row];
        let (mut x, mut y) = (0.0, 0.0);
        for n in 0..row {
            x += p[n] * g[2 * n];
            y += p[n] * g[2 * n + 1];
        }
        out[2 * r] = x;
        out[2 * r + 1] = y;
    }
    DenseTensor::from_vec(&[s[0], s[1], 2], out)
}

pub fn form_flow_backward(grad_flow: &DenseTensor, grid: &DenseTensor, probs_shape: &[usize]) -> DenseTensor {
    let row = probs_shape[2] * probs_shape[3];
    let rows = probs_shape[0] * probs_shape[1];
    let g = grid.data();
    let mut out = vec![0.0; rows * row];
    for r in 0..rows {
        let (gx, gy) = (grad_flow.data()[2 * r], grad_flow.data()[2 * r + 1]);
        for n in 0..row {
            out[r * row + n] = gx * g[2 * n] + gy * g[2 * n + 1];
        }
    }
    DenseTensor::from_vec(probs_shape, out).unwrap()
}

/// Normalized truncated-linear weights `max(0, tau - d)` over the grid. If no
/// node lies within `tau`, the nearest node gets all the weight.
pub fn soft_sampler(kp: (f64, f64), grid: &DenseTensor, tau: f64) -> DenseTensor {
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let g = grid.data();
    let mut weights = vec![0.0; h * w];
    let mut nearest = (0, f64::INFINITY);
    for n in 0..h * w {
        let d = ((kp.0 - g[2 * n]).powi(2) + (kp.1 - g[2 * n + 1]).powi(2)).sqrt();
        weights[n] = (tau - d).max(0.0);
        if d < nearest.1 {
            nearest = (n, d);
        }
    }
    let z: f64 = weights.iter().sum();
    if z > 0.0 {
        weights.iter_mut().for_each(|v| *v /= z);
    } else {
        weights[nearest.0] = 1.0;
    }
    DenseTensor::from_vec(&[h, w], weights).unwrap()
}

/// `sum_{ij} W_ij * flow_ij`.
pub fn transfer_keypoint(flow: &DenseTensor, weights: &DenseTensor) -> (f64, f64) {
    let f = flow.data();
    weights.data().iter().enumerate().fold((0.0, 0.0), |(x, y), (n, &wt)| {
        (x + wt * f[2 * n], y + wt * f[2 * n + 1])
    })
}

/// Pixel coordinate of a normalized coordinate.
pub fn denormalize(coord: (f64, f64), width: usize, height: usize) -> (f64, f64) {
    ((coord.0 + 1.0) / 2.0 * (width as f64 - 1.0), (coord.1 + 1.0) / 2.0 * (height as f64 - 1.0))
}

pub fn normalize(px: (f64, f64), width: usize, height: usize) -> (f64, f64) {
    (px.0 / (width as f64 - 1.0) * 2.0 - 1.0, px.1 / (height as f64 - 1.0) * 2.0 - 1.0)
}
