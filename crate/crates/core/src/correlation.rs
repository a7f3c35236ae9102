//! Features, the scale pyramid, and the multi-scale correlation volume.
//!
//! The feature backbone is a hand-built patch descriptor (or seeded random
//! features for tests). Each pyramid level bilinearly resizes the base map
//! by a power of `sqrt(2)` and applies its own learnable 3x3 projection
//! that divides the channel count by `rho`. Clamped cosine correlations of
//! every (source scale, target scale) pair are resized to a common grid and
//! stacked into a `[H, W, S, H, W, S]` volume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ChmError, Result};
use crate::image::GrayImage;
use crate::tensor::{DenseTensor, PairResize};

/// `[C, H, W]` feature map at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: DenseTensor,
    pub scale_id: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Extractor {
    /// Mean-subtracted, L2-normalized `side x side` patch of the cell's
    /// neighbourhood followed by an 8-bin gradient-orientation histogram.
    Patch { side: usize },
    /// Deterministic Gaussian features.
    Synthetic { seed: u64, channels: usize },
}

pub const HIST_BINS: usize = 8;

impl Extractor {
    pub fn channels(&self) -> usize {
        match *self {
            Extractor::Patch { side } => side * side + HIST_BINS,
            Extractor::Synthetic { channels, .. } => channels,
        }
    }
}

impl Default for Extractor {
    fn default() -> Self {
        Extractor::Patch { side: 8 }
    }
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Features on a `grid_h x grid_w` grid of image cells.
pub fn extract_features(
    image: &GrayImage,
    grid_h: usize,
    grid_w: usize,
    extractor: Extractor,
) -> Result<FeatureMap> {
    if grid_h < 2 || grid_w < 2 || image.height < grid_h * 2 || image.width < grid_w * 2 {
        return Err(ChmError::ImageTooSmall {
            width: image.width,
            height: image.height,
            grid_h,
            grid_w,
        });
    }
    let c = extractor.channels();
    let mut values = DenseTensor::zeros(&[c, grid_h, grid_w])?;
    match extractor {
        Extractor::Synthetic { seed, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            values.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        Extractor::Patch { side } => {
            let cell_h = image.height as f64 / grid_h as f64;
            let cell_w = image.width as f64 / grid_w as f64;
            let mut desc = vec![0.0; c];
            for gy in 0..grid_h {
                for gx in 0..grid_w {
                    // Cell centers sit on the align-corners grid so grid index
                    // and normalized image coordinate agree.
                    let cy = gy as f64 * (image.height - 1) as f64 / (grid_h - 1) as f64;
                    let cx = gx as f64 * (image.width - 1) as f64 / (grid_w - 1) as f64;
                    patch_descriptor(image, cx, cy, 2.0 * cell_w, 2.0 * cell_h, side, &mut desc);
                    for (ch, &v) in desc.iter().enumerate() {
                        values.data_mut()[(ch * grid_h + gy) * grid_w + gx] = v;
                    }
                }
            }
        }
    }
    Ok(FeatureMap { values, scale_id: 0 })
}

/// Descriptor of the window of size `win_w x win_h` centred on `(cx, cy)`.
fn patch_descriptor(
    image: &GrayImage,
    cx: f64,
    cy: f64,
    win_w: f64,
    win_h: f64,
    side: usize,
    out: &mut [f64],
) {
    let (patch, hist) = out.split_at_mut(side * side);
    // Each patch entry averages a 3x3 set of bilinear samples in its sub-block.
    let step_x = win_w / side as f64;
    let step_y = win_h / side as f64;
    for py in 0..side {
        for px in 0..side {
            let by = cy - win_h / 2.0 + (py as f64 + 0.5) * step_y;
            let bx = cx - win_w / 2.0 + (px as f64 + 0.5) * step_x;
            let mut acc = 0.0;
            for sy in [-1.0, 0.0, 1.0] {
                for sx in [-1.0, 0.0, 1.0] {
                    acc += image.sample(bx + sx * step_x / 3.0, by + sy * step_y / 3.0);
                }
            }
            patch[py * side + px] = acc / 9.0;
        }
    }
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    patch.iter_mut().for_each(|v| *v -= mean);
    l2_normalize(patch);

    hist.iter_mut().for_each(|h| *h = 0.0);
    let x0 = (cx - win_w / 2.0).round() as i64;
    let y0 = (cy - win_h / 2.0).round() as i64;
    for y in y0..y0 + win_h.round() as i64 {
        for x in x0..x0 + win_w.round() as i64 {
            let gx = image.get_clamped(x + 1, y) - image.get_clamped(x - 1, y);
            let gy = image.get_clamped(x, y + 1) - image.get_clamped(x, y - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag < 1e-12 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
            let bin = ((angle / std::f64::consts::TAU * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            hist[bin] += mag;
        }
    }
    l2_normalize(hist);
}

/// Scale pyramid settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidConfig {
    pub scales: usize,
    pub rho: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { scales: 3, rho: 4 }
    }
}

impl PyramidConfig {
    /// Resize factors `sqrt(2)^(s - (S-1)/2)`: `{1/sqrt(2), 1, sqrt(2)}` for S = 3.
    pub fn factors(&self) -> Vec<f64> {
        let mid = (self.scales as f64 - 1.0) / 2.0;
        (0..self.scales).map(|s| std::f64::consts::SQRT_2.powf(s as f64 - mid)).collect()
    }

    /// Spatial extent after resizing by `factor`: nearest integer, at least 2.
    pub fn resized_extent(extent: usize, factor: f64) -> usize {
        ((extent as f64 * factor).round() as usize).max(2)
    }
}

/// One learnable 3x3 projection `[C_out, C_in, 3, 3]` with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub weights: DenseTensor,
    pub bias: Vec<f64>,
}

impl Projection {
    pub fn zeros(c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self { weights: DenseTensor::zeros(&[c_out, c_in, 3, 3])?, bias: vec![0.0; c_out] })
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Center-tap channel selection: output `o` copies input `o * stride`.
    pub fn channel_select(c_in: usize, c_out: usize) -> Result<Self> {
        let mut p = Self::zeros(c_in, c_out)?;
        let stride = c_in / c_out;
        for o in 0..c_out {
            p.weights.set(&[o, o * stride, 1, 1], 1.0);
        }
        Ok(p)
    }

    /// Center-tap Gaussian random projection with variance `1 / c_in`.
    pub fn random(c_in: usize, c_out: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(c_in, c_out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (c_in as f64).sqrt()).unwrap();
        for o in 0..c_out {
            for i in 0..c_in {
                p.weights.set(&[o, i, 1, 1], normal.sample(&mut rng));
            }
        }
        Ok(p)
    }

    /// 3x3 same-padded multi-channel convolution of `[C_in, H, W]`.
    pub fn apply(&self, input: &DenseTensor) -> Result<DenseTensor> {
        let (c_in, h, w) = chw(input)?;
        if c_in != self.c_in() {
            return Err(ChmError::ShapeMismatch {
                expected: vec![self.c_in(), h, w],
                got: input.shape().to_vec(),
            });
        }
        let c_out = self.c_out();
        let mut out = DenseTensor::zeros(&[c_out, h, w])?;
        let x = input.data();
        let wts = self.weights.data();
        let o_data = out.data_mut();
        for o in 0..c_out {
            let plane = &mut o_data[o * h * w..(o + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..c_in {
                let src = &x[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = wts[((o * c_in + i) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as i64 - 1;
                        let dx = kx as i64 - 1;
                        for y in 0..h as i64 {
                            let sy = y + dy;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            let xlo = (-dx).max(0);
                            let xhi = (w as i64 - dx).min(w as i64);
                            for xx in xlo..xhi {
                                plane[(y * w as i64 + xx) as usize] +=
                                    wv * src[(sy * w as i64 + xx + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of the weights and bias given the upstream gradient
    /// `[C_out, H, W]` and the forward input `[C_in, H, W]`.
    pub fn param_grads(&self, input: &DenseTensor, grad_out: &DenseTensor) -> Result<Projection> {
        let (c_in, h, w) = chw(input)?;
        let c_out = self.c_out();
        if grad_out.shape() != [c_out, h, w] {
            return Err(ChmError::ShapeMismatch {
                expected: vec![c_out, h, w],
                got: grad_out.shape().to_vec(),
            });
        }
        let mut g = Projection::zeros(c_in, c_out)?;
        let x = input.data();
        let go = grad_out.data();
        for o in 0..c_out {
            let gplane = &go[o * h * w..(o + 1) * h * w];
            g.bias[o] = gplane.iter().sum();
            for i in 0..c_in {
                let src = &x[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let dy = ky as i64 - 1;
                        let dx = kx as i64 - 1;
                        let mut acc = 0.0;
                        for y in 0..h as i64 {
                            let sy = y + dy;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            let xlo = (-dx).max(0);
                            let xhi = (w as i64 - dx).min(w as i64);
                            for xx in xlo..xhi {
                                acc += gplane[(y * w as i64 + xx) as usize]
                                    * src[(sy * w as i64 + xx + dx) as usize];
                            }
                        }
                        g.weights.data_mut()[((o * c_in + i) * 3 + ky) * 3 + kx] = acc;
                    }
                }
            }
        }
        Ok(g)
    }
}

impl Projection {
    /// Gradient with respect to the `[C_in, H, W]` input.
    pub fn input_grad(&self, grad_out: &DenseTensor) -> Result<DenseTensor> {
        let (c_out, h, w) = chw(grad_out)?;
        let c_in = self.c_in();
        let mut out = DenseTensor::zeros(&[c_in, h, w])?;
        let go = grad_out.data();
        let wts = self.weights.data();
        let gi = out.data_mut();
        for o in 0..c_out {
            let gplane = &go[o * h * w..(o + 1) * h * w];
            for i in 0..c_in {
                let dst = &mut gi[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = wts[((o * c_in + i) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (dy, dx) = (ky as i64 - 1, kx as i64 - 1);
                        for y in 0..h as i64 {
                            let sy = y + dy;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            for xx in (-dx).max(0)..(w as i64 - dx).min(w as i64) {
                                dst[(sy * w as i64 + xx + dx) as usize] += wv * gplane[(y * w as i64 + xx) as usize];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn chw(t: &DenseTensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(ChmError::ShapeMismatch { expected: vec![0, 0, 0], got: t.shape().to_vec() }),
    }
}

/// Projections for every pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidParams {
    pub levels: Vec<Projection>,
}

impl PyramidParams {
    /// Every level starts from the same seeded random projection so that
    /// cross-scale correlations compare like with like.
    pub fn random(cfg: &PyramidConfig, c_in: usize, seed: u64) -> Result<Self> {
        if !c_in.is_multiple_of(cfg.rho) {
            return Err(ChmError::Config(format!(
                "channel count {c_in} is not divisible by rho = {}",
                cfg.rho
            )));
        }
        let p = Projection::random(c_in, c_in / cfg.rho, seed)?;
        Ok(Self { levels: vec![p; cfg.scales] })
    }

    pub fn channel_select(cfg: &PyramidConfig, c_in: usize) -> Result<Self> {
        let p = Projection::channel_select(c_in, c_in / cfg.rho)?;
        Ok(Self { levels: vec![p; cfg.scales] })
    }

    pub fn n_params(&self) -> usize {
        self.levels.iter().map(|p| p.weights.len() + p.bias.len()).sum()
    }
}

/// Resize operator used by pyramid level `s` for a `[C, H, W]` base map.
pub fn level_resize(base_shape: &[usize], factor: f64) -> Result<PairResize> {
    let (h, w) = (base_shape[1], base_shape[2]);
    let nh = PyramidConfig::resized_extent(h, factor);
    let nw = PyramidConfig::resized_extent(w, factor);
    PairResize::new(base_shape, &[(1, 2)], &[(nh, nw)])
}

/// Resized (pre-projection) maps and projected maps for every level.
pub fn build_pyramid(
    f: &FeatureMap,
    cfg: &PyramidConfig,
    params: &PyramidParams,
) -> Result<Vec<FeatureMap>> {
    if params.levels.len() != cfg.scales {
        return Err(ChmError::Config(format!(
            "{} projections for {} scales",
            params.levels.len(),
            cfg.scales
        )));
    }
    cfg.factors()
        .iter()
        .zip(&params.levels)
        .enumerate()
        .map(|(s, (&factor, proj))| {
            let resized = level_resize(f.values.shape(), factor)?.apply(&f.values);
            Ok(FeatureMap { values: proj.apply(&resized)?, scale_id: s })
        })
        .collect()
}

/// Clamped cosine similarity of every source position with every target
/// position, `[Hm, Wm, Hn, Wn]`. Zero-norm vectors give 0.
pub fn correlate_pair(src: &FeatureMap, trg: &FeatureMap) -> Result<DenseTensor> {
    Ok(correlate_with_cosines(src, trg)?.0)
}

/// Returns the clamped correlation and the unclamped cosines.
pub(crate) fn correlate_with_cosines(
    src: &FeatureMap,
    trg: &FeatureMap,
) -> Result<(DenseTensor, DenseTensor)> {
    let (c, hm, wm) = chw(&src.values)?;
    let (c2, hn, wn) = chw(&trg.values)?;
    if c != c2 {
        return Err(ChmError::ShapeMismatch {
            expected: vec![c, hn, wn],
            got: trg.values.shape().to_vec(),
        });
    }
    let (ns, nt) = (hm * wm, hn * wn);
    let a = transpose_to_rows(&src.values);
    let b = transpose_to_rows(&trg.values);
    let na: Vec<f64> = a.chunks(c).map(norm).collect();
    let nb: Vec<f64> = b.chunks(c).map(norm).collect();
    let mut cos = vec![0.0; ns * nt];
    for i in 0..ns {
        if na[i] == 0.0 {
            continue;
        }
        let ai = &a[i * c..(i + 1) * c];
        for j in 0..nt {
            if nb[j] == 0.0 {
                continue;
            }
            let dot: f64 = ai.iter().zip(&b[j * c..(j + 1) * c]).map(|(x, y)| x * y).sum();
            cos[i * nt + j] = dot / (na[i] * nb[j]);
        }
    }
    let shape = [hm, wm, hn, wn];
    let cos = DenseTensor::from_vec(&shape, cos)?;
    let clamped = cos.map(crate::tensor::Elementwise::Relu);
    Ok((clamped, cos))
}

fn norm(v: &[f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        0.0
    } else {
        n
    }
}

/// `[C, H, W]` -> position-major rows of length C.
fn transpose_to_rows(t: &DenseTensor) -> Vec<f64> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = t.data()[ch * h * w + p];
        }
    }
    out
}

/// Gradients of the clamped correlation with respect to both feature maps.
pub(crate) fn correlate_backward(
    src: &FeatureMap,
    trg: &FeatureMap,
    cos: &DenseTensor,
    grad: &DenseTensor,
) -> (DenseTensor, DenseTensor) {
    let (c, hm, wm) = (src.channels(), src.height(), src.width());
    let (hn, wn) = (trg.height(), trg.width());
    let (ns, nt) = (hm * wm, hn * wn);
    let a = transpose_to_rows(&src.values);
    let b = transpose_to_rows(&trg.values);
    let na: Vec<f64> = a.chunks(c).map(norm).collect();
    let nb: Vec<f64> = b.chunks(c).map(norm).collect();
    let mut ga = vec![0.0; ns * c];
    let mut gb = vec![0.0; nt * c];
    for i in 0..ns {
        if na[i] == 0.0 {
            continue;
        }
        for j in 0..nt {
            let cv = cos.data()[i * nt + j];
            let g = grad.data()[i * nt + j];
            if cv <= 0.0 || g == 0.0 || nb[j] == 0.0 {
                continue;
            }
            let inv = 1.0 / (na[i] * nb[j]);
            for k in 0..c {
                let (ak, bk) = (a[i * c + k], b[j * c + k]);
                ga[i * c + k] += g * (bk * inv - cv * ak / (na[i] * na[i]));
                gb[j * c + k] += g * (ak * inv - cv * bk / (nb[j] * nb[j]));
            }
        }
    }
    let to_chw = |rows: Vec<f64>, h: usize, w: usize| {
        let mut out = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                out[ch * h * w + p] = rows[p * c + ch];
            }
        }
        DenseTensor::from_vec(&[c, h, w], out).unwrap()
    };
    (to_chw(ga, hm, wm), to_chw(gb, hn, wn))
}

/// Resize operator taking a pair correlation to `[H, W, H, W]`.
pub fn pair_resize(pair_shape: &[usize], h: usize, w: usize) -> Result<PairResize> {
    PairResize::new(pair_shape, &[(0, 1), (2, 3)], &[(h, w), (h, w)])
}

/// Stacks the `S x S` pair correlations into `[H, W, S, H, W, S]`, slot
/// `(i, j)` holding the source-scale `i`, target-scale `j` pair.
pub fn assemble_6d(pairs: &[Vec<DenseTensor>], h: usize, w: usize) -> Result<DenseTensor> {
    let s = pairs.len();
    if s == 0 || pairs.iter().any(|row| row.len() != s) {
        return Err(ChmError::Config("pair grid must be S x S and nonempty".into()));
    }
    let mut out = DenseTensor::zeros(&[h, w, s, h, w, s])?;
    for (i, row) in pairs.iter().enumerate() {
        for (j, pair) in row.iter().enumerate() {
            let resized = pair_resize(pair.shape(), h, w)?.apply(pair);
            write_slot(&mut out, &resized, i, j);
        }
    }
    Ok(out)
}

/// Copies a `[H, W, H, W]` tensor into scale slot `(i, j)` of a 6D volume.
pub(crate) fn write_slot(vol: &mut DenseTensor, slot: &DenseTensor, i: usize, j: usize) {
    let sh = vol.shape().to_vec();
    let (h, w, s) = (sh[0], sh[1], sh[2]);
    let data = vol.data_mut();
    for (n, &v) in slot.data().iter().enumerate() {
        let (a, b) = (n / (h * w), n % (h * w));
        data[(a * s + i) * h * w * s + b * s + j] = v;
    }
}

/// Extracts scale slot `(i, j)` of a 6D volume as `[H, W, H, W]`.
pub(crate) fn read_slot(vol: &DenseTensor, i: usize, j: usize) -> DenseTensor {
    let sh = vol.shape();
    let (h, w, s) = (sh[0], sh[1], sh[2]);
    let data = vol.data();
    let out = (0..h * w * h * w)
        .map(|n| {
            let (a, b) = (n / (h * w), n % (h * w));
            data[(a * s + i) * h * w * s + b * s + j]
        })
        .collect();
    DenseTensor::from_vec(&[h, w, h, w], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn textured(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        GrayImage::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    acc += raw[yy * w + xx];
                    n += 1.0;
                }
            }
            acc / n
        })
    }

    #[test]
    fn constant_image_gives_zero_descriptor() {
        let img = GrayImage::new(64, 64, 0.4);
        let f = extract_features(&img, 4, 4, Extractor::Patch { side: 4 }).unwrap();
        assert_eq!(f.channels(), 24);
        assert!(f.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = textured(64, 48, 1);
        let a = extract_features(&img, 6, 8, Extractor::default()).unwrap();
        let b = extract_features(&img, 6, 8, Extractor::default()).unwrap();
        assert_eq!(a, b);
        let s = Extractor::Synthetic { seed: 7, channels: 12 };
        let c = extract_features(&img, 4, 4, s).unwrap();
        let d = extract_features(&img, 4, 4, s).unwrap();
        assert_eq!(c.values.data(), d.values.data());
        assert!(matches!(
            extract_features(&GrayImage::new(5, 5, 0.0), 4, 4, Extractor::default()),
            Err(ChmError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn pyramid_extents_and_single_scale() {
        assert_eq!(PyramidConfig::resized_extent(15, std::f64::consts::SQRT_2), 21);
        assert_eq!(PyramidConfig::resized_extent(15, 1.0 / std::f64::consts::SQRT_2), 11);
        assert_eq!(PyramidConfig::resized_extent(2, 0.5), 2);
        let f = extract_features(&textured(64, 64, 2), 8, 8, Extractor::Synthetic { seed: 1, channels: 8 })
            .unwrap();
        let cfg = PyramidConfig { scales: 1, rho: 4 };
        let params = PyramidParams::channel_select(&cfg, 8).unwrap();
        let pyr = build_pyramid(&f, &cfg, &params).unwrap();
        assert_eq!(pyr.len(), 1);
        // Delta projection selects channels 0 and 4.
        assert_eq!(pyr[0].values.shape(), &[2, 8, 8]);
        assert_eq!(&pyr[0].values.data()[..64], &f.values.data()[..64]);
        assert_eq!(&pyr[0].values.data()[64..], &f.values.data()[4 * 64..5 * 64]);
        let cfg3 = PyramidConfig::default();
        let pyr3 = build_pyramid(&f, &cfg3, &PyramidParams::random(&cfg3, 8, 0).unwrap()).unwrap();
        let sizes: Vec<usize> = pyr3.iter().map(|m| m.height()).collect();
        assert_eq!(sizes, vec![6, 8, 11]);
    }

    #[test]
    fn correlation_edge_cases() {
        let mk = |v: &[f64]| FeatureMap {
            values: DenseTensor::from_vec(&[v.len(), 1, 1], v.to_vec()).unwrap(),
            scale_id: 0,
        };
        let c = |a: &[f64], b: &[f64]| correlate_pair(&mk(a), &mk(b)).unwrap().data()[0];
        assert!((c(&[0.6, 0.8], &[0.6, 0.8]) - 1.0).abs() < 1e-15);
        assert_eq!(c(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(c(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
        assert_eq!(c(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!(correlate_pair(&mk(&[1.0]), &mk(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn self_correlation_has_unit_diagonal_and_bounds() {
        let f = extract_features(&textured(64, 64, 3), 6, 6, Extractor::default()).unwrap();
        let corr = correlate_pair(&f, &f).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert!((corr.get(&[y, x, y, x]) - 1.0).abs() < 1e-12);
            }
        }
        assert!(corr.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn assemble_slots_and_constants() {
        let mk = |v: f64, h: usize| DenseTensor::new(&[h, h, h, h], v).unwrap();
        let pairs = vec![
            vec![mk(0.0, 3), mk(0.0, 4)],
            vec![mk(1.0, 5), mk(0.0, 4)],
        ];
        let vol = assemble_6d(&pairs, 4, 4).unwrap();
        assert_eq!(vol.shape(), &[4, 4, 2, 4, 4, 2]);
        for flat in 0..vol.len() {
            let idx = vol.unravel(flat);
            let expect = if idx[2] == 1 && idx[5] == 0 { 1.0 } else { 0.0 };
            assert_eq!(vol.data()[flat], expect);
        }
        assert_eq!(read_slot(&vol, 1, 0), DenseTensor::new(&[4, 4, 4, 4], 1.0).unwrap());
        let single = assemble_6d(&[vec![mk(0.3, 3)]], 5, 5).unwrap();
        assert!(single.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn projection_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DenseTensor::from_vec(&[3, 4, 5], (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let g = DenseTensor::from_vec(&[2, 4, 5], (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut p = Projection::zeros(3, 2).unwrap();
        p.weights.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let grads = p.param_grads(&x, &g).unwrap();
        let f = |p: &Projection| p.apply(&x).unwrap().dot(&g);
        for idx in [0usize, 7, 20, 53] {
            let mut pp = p.clone();
            pp.weights.data_mut()[idx] += 1e-6;
            let mut pm = p.clone();
            pm.weights.data_mut()[idx] -= 1e-6;
            let fd = (f(&pp) - f(&pm)) / 2e-6;
            assert!((fd - grads.weights.data()[idx]).abs() < 1e-7);
        }
        let mut pb = p.clone();
        pb.bias[1] += 1.0;
        assert!((f(&pb) - f(&p) - grads.bias[1]).abs() < 1e-9);
    }
}
