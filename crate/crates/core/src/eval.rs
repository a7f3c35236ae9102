//! PCK, precision-recall over scored grid matches, and scale-vote
//! histograms, plus their CSV renderings.

use log::warn;

use crate::chm::ScaleArgs;
use crate::error::{ChmError, Result};
use crate::image::GrayImage;
use crate::model::{Forward, Model, PairFeatures};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TauMode {
    /// Reference size is the image.
    Img,
    /// Reference size is the object bounding box.
    Bbox,
}

impl TauMode {
    pub fn name(self) -> &'static str {
        match self {
            TauMode::Img => "img",
            TauMode::Bbox => "bbox",
        }
    }
}

impl std::str::FromStr for TauMode {
    type Err = ChmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img" => Ok(TauMode::Img),
            "bbox" => Ok(TauMode::Bbox),
            _ => Err(ChmError::Config(format!("unknown PCK mode `{s}` (img | bbox)"))),
        }
    }
}

/// One predicted keypoint with its ground truth and reference size
/// `(w_tau, h_tau)`, all in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointEval {
    pub predicted: (f64, f64),
    pub truth: (f64, f64),
    pub reference: (f64, f64),
}

/// Fraction of keypoints with `||pred - truth|| <= alpha * max(w, h)`.
pub fn pck(items: &[KeypointEval], alpha: f64) -> Result<f64> {
    if items.is_empty() {
        return Err(ChmError::Empty("keypoints"));
    }
    if !(alpha > 0.0) {
        return Err(ChmError::Config(format!("alpha must be positive, got {alpha}")));
    }
    let hits = items
        .iter()
        .filter(|k| {
            let d = ((k.predicted.0 - k.truth.0).powi(2) + (k.predicted.1 - k.truth.1).powi(2)).sqrt();
            d <= alpha * k.reference.0.max(k.reference.1)
        })
        .count();
    Ok(hits as f64 / items.len() as f64)
}

/// Width and height of the nonzero region, at least 1 each.
pub fn mask_bbox(mask: &GrayImage) -> Option<(f64, f64)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) > 0.0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| (((x1 - x0 + 1) as f64).max(1.0), ((y1 - y0 + 1) as f64).max(1.0)))
}

/// Reference size for a target image under `mode`.
pub fn reference_size(mode: TauMode, target: &GrayImage, mask: Option<&GrayImage>) -> Result<(f64, f64)> {
    match mode {
        TauMode::Img => Ok((target.width as f64, target.height as f64)),
        TauMode::Bbox => mask
            .and_then(mask_bbox)
            .ok_or(ChmError::Empty("object mask for bbox reference")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredMatch {
    /// Index of the source grid point.
    pub source: usize,
    pub predicted: (f64, f64),
    pub score: f64,
    pub in_mask: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Transfers an `n x n` regular source grid (pixel corners included) and
/// scores every match by the final correlation entry nearest to it.
pub fn scored_grid_matches(
    model: &Model,
    fwd: &Forward,
    feats: &PairFeatures,
    mask: &GrayImage,
    n: usize,
) -> Vec<ScoredMatch> {
    let (sw, sh) = feats.source_size;
    let (tw, th) = feats.target_size;
    let lin = |i: usize, len: usize| if n == 1 { (len as f64 - 1.0) / 2.0 } else { i as f64 * (len as f64 - 1.0) / (n - 1) as f64 };
    let points: Vec<(f64, f64)> = (0..n * n).map(|p| (lin(p % n, sw), lin(p / n, sh))).collect();
    let preds = model.transfer(fwd, feats, &points);
    let g = fwd.corr.shape()[0];
    let cell = |v: f64, len: usize| ((v / (len as f64 - 1.0) * (g - 1) as f64).round().max(0.0) as usize).min(g - 1);
    points
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(idx, (s, t))| {
            let score = fwd.corr.get(&[cell(s.1, sh), cell(s.0, sw), cell(t.1, th), cell(t.0, tw)]);
            let (px, py) = (t.0.round(), t.1.round());
            let in_mask = px >= 0.0
                && py >= 0.0
                && (px as usize) < mask.width
                && (py as usize) < mask.height
                && mask.get(px as usize, py as usize) > 0.0;
            ScoredMatch { source: idx, predicted: *t, score, in_mask }
        })
        .collect()
}

/// Top-k sweep over matches sorted by descending score (ties by source
/// index). Precision `TP / k`, recall `TP / N_mask` with `N_mask` the
/// number of in-mask matches overall.
pub fn pr_curve(matches: &[ScoredMatch]) -> Result<Vec<PrPoint>> {
    if matches.is_empty() {
        return Err(ChmError::Empty("matches"));
    }
    let n_mask = matches.iter().filter(|m| m.in_mask).count();
    if n_mask == 0 {
        return Err(ChmError::Empty("in-mask matches"));
    }
    let mut order: Vec<&ScoredMatch> = matches.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.source.cmp(&b.source)));
    let mut tp = 0;
    Ok(order
        .iter()
        .enumerate()
        .map(|(i, m)| {
            tp += m.in_mask as usize;
            PrPoint { k: i + 1, precision: tp as f64 / (i + 1) as f64, recall: tp as f64 / n_mask as f64 }
        })
        .collect())
}

/// Pools the grid matches of several pairs into one curve. Pairs whose
/// mask is empty are skipped with a warning.
pub fn pr_curve_pooled(per_pair: &[(Vec<ScoredMatch>, &GrayImage)]) -> Result<Vec<PrPoint>> {
    let mut pooled = Vec::new();
    let mut offset = 0;
    for (i, (matches, mask)) in per_pair.iter().enumerate() {
        if mask.pixels.iter().all(|&v| v == 0.0) {
            warn!("pair {i}: empty mask, skipped");
            continue;
        }
        pooled.extend(matches.iter().map(|m| ScoredMatch { source: m.source + offset, ..*m }));
        offset += matches.len();
    }
    pr_curve(&pooled)
}

/// Precision at the first `k` whose recall reaches `recall`.
pub fn precision_at_recall(curve: &[PrPoint], recall: f64) -> Option<f64> {
    curve.iter().find(|p| p.recall >= recall).map(|p| p.precision)
}

/// Counts of winning `(source scale, target scale)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleHistogram {
    pub scales: usize,
    pub counts: Vec<u64>,
}

impl ScaleHistogram {
    pub fn new(scales: usize) -> Self {
        Self { scales, counts: vec![0; scales * scales] }
    }

    pub fn add(&mut self, args: &ScaleArgs) -> Result<()> {
        if args.scales != self.scales {
            return Err(ChmError::ShapeMismatch { expected: vec![self.scales], got: vec![args.scales] });
        }
        self.counts.iter_mut().zip(args.counts()).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let t = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    /// Most frequent `(m, n)`; ties take the smallest flat index.
    pub fn mode(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        (best / self.scales, best % self.scales)
    }

    pub fn center(&self) -> (usize, usize) {
        (self.scales / 2, self.scales / 2)
    }

    /// Share of votes outside the center bin.
    pub fn off_center_mass(&self) -> f64 {
        let (c, _) = self.center();
        1.0 - self.frequencies()[c * self.scales + c]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,n,count,freq\n");
        for (i, (&c, f)) in self.counts.iter().zip(self.frequencies()).enumerate() {
            out.push_str(&format!("{},{},{},{}\n", i / self.scales, i % self.scales, c, sig9(f)));
        }
        out
    }
}

pub fn pr_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("k,precision,recall\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.k, sig9(p.precision), sig9(p.recall)));
    }
    out
}

pub fn pck_csv(rows: &[(f64, TauMode, f64)]) -> String {
    let mut out = String::from("alpha,mode,pck\n");
    for (a, m, v) in rows {
        out.push_str(&format!("{},{},{}\n", sig9(*a), m.name(), sig9(*v)));
    }
    out
}

/// Decimal rendering with 9 significant digits, trailing zeros trimmed;
/// scientific notation outside `[1e-5, 1e9)`.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let e = x.abs().log10().floor() as i32;
    if !(-5..9).contains(&e) {
        return format!("{x:.8e}");
    }
    let s = format!("{:.*}", (8 - e).max(0) as usize, x);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}
