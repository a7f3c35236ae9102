//! Browser demo bindings: kernel sharing dumps, the convolution call-count
//! comparison, and matching a synthetic pair.
//!
//! The `*_impl` functions are plain Rust so they can be tested natively;
//! the exported wrappers only convert errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use chm_core::convnd::{conv_fast, conv_sliced, OpCounter};
use chm_core::kernel::{build_sharing, DumpFormat, InitMode, KernelGeometry, SharingScheme};
use chm_core::learn::{make_synthetic_pair, SynthConfig};
use chm_core::model::{Model, ModelConfig};
use chm_core::{ChmError, DenseTensor};

/// Desk model trained with `chm train --config configs/desk.conf --seed 1`.
const TRAINED_CHECKPOINT: &str = include_str!("../assets/desk-checkpoint.txt");

fn now_ms() -> f64 {
    #[cfg(target_arch = "wasm32")]
    {
        js_sys::Date::now()
    }
    #[cfg(not(target_arch = "wasm32"))]
    {
        use std::time::{SystemTime, UNIX_EPOCH};
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64() * 1e3).unwrap_or(0.0)
    }
}

fn js(e: ChmError) -> JsError {
    JsError::new(&e.to_string())
}

pub fn kernel_dump_impl(rank: usize, spatial: usize, scale: usize, scheme: &str, dense: bool) -> Result<String, ChmError> {
    let geometry = match rank {
        4 => KernelGeometry::new_4d(spatial)?,
        6 => KernelGeometry::new_6d(spatial, scale)?,
        r => return Err(ChmError::Config(format!("rank must be 4 or 6, got {r}"))),
    };
    let mut k = build_sharing(geometry, scheme.parse::<SharingScheme>()?)?;
    k.init(InitMode::Delta, &mut ChaCha8Rng::seed_from_u64(0));
    Ok(k.dump(if dense { DumpFormat::DenseMaps } else { DumpFormat::Classes }))
}

/// Text dump of a delta-initialized shared kernel. The second header line
/// holds the class count.
#[wasm_bindgen]
pub fn kernel_dump(rank: usize, spatial: usize, scale: usize, scheme: &str, dense: bool) -> Result<String, JsError> {
    kernel_dump_impl(rank, spatial, scale, scheme, dense).map_err(js)
}

#[wasm_bindgen]
#[derive(Clone, Copy, Debug)]
pub struct ConvComparison {
    pub fast_calls: u32,
    pub sliced_calls: u32,
    pub fast_ms: f64,
    pub sliced_ms: f64,
    pub max_abs_diff: f64,
}

pub fn compare_conv_impl(size: usize, kernel: usize, seed: u32) -> Result<ConvComparison, ChmError> {
    if size == 0 || size > 24 || kernel.is_multiple_of(2) || kernel > 9 {
        return Err(ChmError::Config("size must be in 1..=24 and the kernel extent odd and <= 9".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut rand = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        DenseTensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let input = rand(&[size; 4])?;
    let k = rand(&[kernel; 4])?;
    let (mut cf, mut cs) = (OpCounter::default(), OpCounter::default());
    let t0 = now_ms();
    let a = conv_fast(&input, &k, &mut cf)?;
    let t1 = now_ms();
    let b = conv_sliced(&input, &k, &mut cs)?;
    let t2 = now_ms();
    Ok(ConvComparison {
        fast_calls: cf.n_3d_conv_calls as u32,
        sliced_calls: cs.n_3d_conv_calls as u32,
        fast_ms: t1 - t0,
        sliced_ms: t2 - t1,
        max_abs_diff: a.max_abs_diff(&b),
    })
}

/// Rank-4 convolution of a random `size^4` input with a `kernel^4` kernel
/// by the folded and the per-slice routes.
#[wasm_bindgen]
pub fn compare_conv(size: usize, kernel: usize, seed: u32) -> Result<ConvComparison, JsError> {
    compare_conv_impl(size, kernel, seed).map_err(js)
}

#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct MatchResult {
    size: usize,
    source: Vec<u8>,
    target: Vec<u8>,
    /// Interleaved `x, y` pixel coordinates.
    source_points: Vec<f64>,
    truth_points: Vec<f64>,
    predicted_points: Vec<f64>,
}

#[wasm_bindgen]
impl MatchResult {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }
    pub fn source(&self) -> Vec<u8> {
        self.source.clone()
    }
    pub fn target(&self) -> Vec<u8> {
        self.target.clone()
    }
    pub fn source_points(&self) -> Vec<f64> {
        self.source_points.clone()
    }
    pub fn truth_points(&self) -> Vec<f64> {
        self.truth_points.clone()
    }
    pub fn predicted_points(&self) -> Vec<f64> {
        self.predicted_points.clone()
    }
    /// Mean distance between predicted and true target points, pixels.
    pub fn mean_error(&self) -> f64 {
        let n = self.truth_points.len() / 2;
        (0..n)
            .map(|i| {
                let dx = self.predicted_points[2 * i] - self.truth_points[2 * i];
                let dy = self.predicted_points[2 * i + 1] - self.truth_points[2 * i + 1];
                (dx * dx + dy * dy).sqrt()
            })
            .sum::<f64>()
            / n.max(1) as f64
    }
}

pub fn match_pair_impl(seed: u32, trained: bool, clutter: usize) -> Result<MatchResult, ChmError> {
    let cfg = ModelConfig::desk();
    let model = if trained {
        Model::from_checkpoint(cfg, TRAINED_CHECKPOINT)?
    } else {
        Model::new(cfg, InitMode::Delta, 1)?
    };
    let synth = SynthConfig { clutter, ..SynthConfig::default() };
    let pair = make_synthetic_pair(seed as u64, &synth)?;
    let feats = model.features(&pair.source, &pair.target)?;
    let fwd = model.forward(&feats)?;
    let src: Vec<(f64, f64)> = pair.keypoints.iter().map(|k| k.0).collect();
    let pred = model.transfer(&fwd, &feats, &src);
    let bytes = |img: &chm_core::image::GrayImage| img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let flat = |pts: &mut dyn Iterator<Item = (f64, f64)>| pts.flat_map(|(x, y)| [x, y]).collect();
    Ok(MatchResult {
        size: synth.image_size,
        source: bytes(&pair.source),
        target: bytes(&pair.target),
        source_points: flat(&mut src.iter().copied()),
        truth_points: flat(&mut pair.keypoints.iter().map(|k| k.1)),
        predicted_points: flat(&mut pred.into_iter()),
    })
}

/// Generates synthetic pair `seed` and transfers its keypoints with the
/// trained desk model or an identity-initialized one.
#[wasm_bindgen]
pub fn match_pair(seed: u32, trained: bool, clutter: usize) -> Result<MatchResult, JsError> {
    match_pair_impl(seed, trained, clutter).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_reports_class_counts() {
        let text = kernel_dump_impl(6, 5, 3, "psi", false).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("psi 6 5 5 3 220 "));
        let text = kernel_dump_impl(4, 5, 1, "iso", false).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("iso 4 5 5 1 15 "));
        assert!(kernel_dump_impl(5, 5, 1, "iso", false).is_err());
        assert!(kernel_dump_impl(4, 5, 1, "round", false).is_err());
    }

    #[test]
    fn conv_comparison_counts_calls() {
        let c = compare_conv_impl(8, 3, 1).unwrap();
        assert_eq!((c.fast_calls, c.sliced_calls), (3, 24));
        assert!(c.max_abs_diff < 1e-10);
        assert!(compare_conv_impl(8, 4, 1).is_err());
    }

    #[test]
    fn bundled_checkpoint_matches_the_desk_model() {
        let m = match_pair_impl(5, true, 10).unwrap();
        assert_eq!(m.source().len(), m.size() * m.size());
        assert_eq!(m.predicted_points().len(), m.truth_points().len());
        assert!(m.mean_error().is_finite());
        let d = match_pair_impl(5, false, 10).unwrap();
        assert_eq!(d.source_points(), m.source_points());
    }
}
