//! Synthetic image pairs: a textured object over clutter, moved by a known
//! similarity transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ChmError, Result};
use crate::image::GrayImage;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Maximum translation per axis, as a fraction of the image size.
    pub max_translation: f64,
    /// Uniform scale drawn log-uniformly from this range.
    pub scale_range: (f64, f64),
    pub n_keypoints: usize,
    /// Object radius as a fraction of the image size.
    pub object_radius: f64,
    /// Background shapes per image.
    pub clutter: usize,
    /// Share of background shapes that are textured distractor blobs.
    pub distractor_ratio: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            max_translation: 0.25,
            scale_range: (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::SQRT_2),
            n_keypoints: 8,
            object_radius: 0.22,
            clutter: 10,
            distractor_ratio: 0.2,
            noise: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if self.image_size < 16 {
            return Err(ChmError::Config(format!("image size {} < 16", self.image_size)));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(ChmError::Config(format!("bad scale range ({lo}, {hi})")));
        }
        if !(0.0..0.5).contains(&self.max_translation) || !(self.object_radius > 0.0 && self.object_radius < 0.5) {
            return Err(ChmError::Config("translation must be in [0, 0.5) and radius in (0, 0.5)".into()));
        }
        if self.n_keypoints == 0 {
            return Err(ChmError::Config("n_keypoints must be positive".into()));
        }
        Ok(())
    }

    /// Same settings with a fixed unit scale.
    pub fn scale_matched(&self) -> Self {
        Self { scale_range: (1.0, 1.0), ..self.clone() }
    }

    pub fn cluttered(&self) -> Self {
        Self { clutter: self.clutter * 3, distractor_ratio: 0.6, ..self.clone() }
    }
}

/// `p -> c + t + s (p - c)` with `c` the source object center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Similarity {
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        (self.cx + self.tx + self.scale * (p.0 - self.cx), self.cy + self.ty + self.scale * (p.1 - self.cy))
    }

    pub fn inverse(&self, q: (f64, f64)) -> (f64, f64) {
        (self.cx + (q.0 - self.cx - self.tx) / self.scale, self.cy + (q.1 - self.cy - self.ty) / self.scale)
    }
}

/// Source and target pixel coordinates of one keypoint.
pub type KeypointPair = ((f64, f64), (f64, f64));

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub source: GrayImage,
    pub target: GrayImage,
    /// `(source, target)` keypoints in pixels.
    pub keypoints: Vec<KeypointPair>,
    /// Object support in the target, 1 inside.
    pub mask: GrayImage,
    pub transform: Similarity,
}

/// Textured blob in its own frame (origin at its center, unit pixels).
#[derive(Clone, Debug)]
struct Blob {
    radius: f64,
    wobble: [(f64, f64); 3],
    base: f64,
    spots: Vec<(f64, f64, f64, f64)>,
    stripe: (f64, f64, f64, f64),
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, radius: f64) -> Self {
        let wobble = [
            (rng.random_range(0.0..0.15), rng.random_range(0.0..std::f64::consts::TAU)),
            (rng.random_range(0.0..0.1), rng.random_range(0.0..std::f64::consts::TAU)),
            (rng.random_range(0.0..0.05), rng.random_range(0.0..std::f64::consts::TAU)),
        ];
        let spots = (0..14)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.2..0.45);
                (r * a.cos(), r * a.sin(), radius * rng.random_range(0.08..0.25), amp)
            })
            .collect();
        let stripe = (
            rng.random_range(0.6..1.6) / radius * std::f64::consts::TAU,
            rng.random_range(0.0..std::f64::consts::PI),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.05..0.15),
        );
        Self { radius, wobble, base: rng.random_range(0.35..0.65), spots, stripe }
    }

    /// Signed distance inside the outline along the ray from the center.
    fn margin(&self, u: f64, v: f64) -> f64 {
        let theta = v.atan2(u);
        let edge = self.radius
            * (1.0 + self.wobble.iter().enumerate().map(|(k, (a, p))| a * ((k as f64 + 2.0) * theta + p).sin()).sum::<f64>());
        edge - (u * u + v * v).sqrt()
    }

    /// `(intensity, alpha)` at `(u, v)` in the blob frame.
    fn eval(&self, u: f64, v: f64) -> (f64, f64) {
        let alpha = (self.margin(u, v) + 0.5).clamp(0.0, 1.0);
        if alpha == 0.0 {
            return (0.0, 0.0);
        }
        let mut val = self.base;
        for &(x, y, s, a) in &self.spots {
            val += a * (-((u - x).powi(2) + (v - y).powi(2)) / (2.0 * s * s)).exp();
        }
        let (f, ang, ph, a) = self.stripe;
        val += a * (f * (u * ang.cos() + v * ang.sin()) + ph).sin();
        (val, alpha)
    }
}

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64, value: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, value: f64 },
    Distractor { cx: f64, cy: f64, blob: Blob },
}

struct Background {
    base: f64,
    wave: (f64, f64, f64, f64),
    shapes: Vec<Shape>,
}

impl Background {
    fn random(rng: &mut ChaCha8Rng, size: f64, cfg: &SynthConfig) -> Self {
        let shapes = (0..cfg.clutter)
            .map(|_| {
                let cx = rng.random_range(0.0..size);
                let cy = rng.random_range(0.0..size);
                let value = rng.random_range(0.1..0.9);
                if rng.random_bool(cfg.distractor_ratio.clamp(0.0, 1.0)) {
                    let r = size * cfg.object_radius * rng.random_range(0.3..0.7);
                    Shape::Distractor { cx, cy, blob: Blob::random(rng, r) }
                } else if rng.random_bool(0.5) {
                    let (w, h) = (rng.random_range(0.05..0.3) * size, rng.random_range(0.05..0.3) * size);
                    Shape::Rect { x0: cx - w / 2.0, y0: cy - h / 2.0, x1: cx + w / 2.0, y1: cy + h / 2.0, value }
                } else {
                    let (rx, ry) = (rng.random_range(0.03..0.15) * size, rng.random_range(0.03..0.15) * size);
                    Shape::Ellipse { cx, cy, rx, ry, value }
                }
            })
            .collect();
        let wave = (
            rng.random_range(1.0..4.0) / size * std::f64::consts::TAU,
            rng.random_range(0.0..std::f64::consts::PI),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.02..0.1),
        );
        Self { base: rng.random_range(0.3..0.7), wave, shapes }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let (f, ang, ph, a) = self.wave;
        let mut v = self.base + a * (f * (x * ang.cos() + y * ang.sin()) + ph).sin();
        for s in &self.shapes {
            match s {
                Shape::Rect { x0, y0, x1, y1, value } => {
                    if x >= *x0 && x <= *x1 && y >= *y0 && y <= *y1 {
                        v = *value;
                    }
                }
                Shape::Ellipse { cx, cy, rx, ry, value } => {
                    if ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0 {
                        v = *value;
                    }
                }
                Shape::Distractor { cx, cy, blob } => {
                    let (val, alpha) = blob.eval(x - cx, y - cy);
                    v = v * (1.0 - alpha) + val * alpha;
                }
            }
        }
        v
    }
}

/// Deterministic pair for `seed`.
pub fn make_synthetic_pair(seed: u64, cfg: &SynthConfig) -> Result<TrainPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let size = n as f64;
    let radius = cfg.object_radius * size;
    let object = Blob::random(&mut rng, radius);
    let (lo, hi) = cfg.scale_range;
    let scale = if lo == hi { lo } else { (rng.random_range(lo.ln()..=hi.ln())).exp() };
    let jitter = 0.1 * size;
    let cx = (size - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
    let cy = (size - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
    let t = cfg.max_translation * size;
    let (tx, ty) = if t > 0.0 { (rng.random_range(-t..=t), rng.random_range(-t..=t)) } else { (0.0, 0.0) };
    let transform = Similarity { scale, tx, ty, cx, cy };

    let bg_src = Background::random(&mut rng, size, cfg);
    let bg_trg = Background::random(&mut rng, size, cfg);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| ChmError::Config(e.to_string()))?;
    let mut render = |bg: &Background, to_object: &dyn Fn(f64, f64) -> (f64, f64), mask: Option<&mut Vec<f64>>| {
        let mut alphas = Vec::with_capacity(n * n);
        let img = GrayImage::from_fn(n, n, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            let (u, v) = to_object(xf, yf);
            let (val, alpha) = object.eval(u, v);
            alphas.push(alpha);
            let px = bg.eval(xf, yf) * (1.0 - alpha) + val * alpha;
            (px + noise.sample(&mut rng)).clamp(0.0, 1.0)
        });
        if let Some(m) = mask {
            *m = alphas;
        }
        img
    };
    let source = render(&bg_src, &|x, y| (x - cx, y - cy), None);
    let mut alphas = Vec::new();
    let target = render(
        &bg_trg,
        &|x, y| {
            let p = transform.inverse((x, y));
            (p.0 - cx, p.1 - cy)
        },
        Some(&mut alphas),
    );
    let mask = GrayImage { width: n, height: n, pixels: alphas.iter().map(|&a| if a >= 0.5 { 1.0 } else { 0.0 }).collect() };

    let mut keypoints = Vec::with_capacity(cfg.n_keypoints);
    let inside = |p: (f64, f64)| p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= size - 1.0 && p.1 <= size - 1.0;
    for _ in 0..2000 {
        if keypoints.len() == cfg.n_keypoints {
            break;
        }
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let r = 0.8 * radius * rng.random_range(0.0f64..1.0).sqrt();
        let k = (cx + r * a.cos(), cy + r * a.sin());
        if object.margin(k.0 - cx, k.1 - cy) < 2.0 {
            continue;
        }
        let k2 = transform.apply(k);
        if inside(k) && inside(k2) {
            keypoints.push((k, k2));
        }
    }
    if keypoints.is_empty() {
        return Err(ChmError::Empty("visible keypoints"));
    }
    Ok(TrainPair { source, target, keypoints, mask, transform })
}

/// `n` pairs; pair `i` uses seed `seed * 1_000_003 + i`.
pub fn make_dataset(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<TrainPair>> {
    (0..n as u64).map(|i| make_synthetic_pair(seed.wrapping_mul(1_000_003).wrapping_add(i), cfg)).collect()
}
