//! CHM layers, the matching head, and the global Hough voting baseline.
//!
//! A CHM layer is a single-channel convolution with a parameter-shared
//! kernel plus a scalar bias. With an `iso` kernel its output at `(x, x')`
//! is exactly the zero-offset bin of a local Hough voting space built from
//! the candidate matches in the windows around `x` and `x'`.
//!
//! The head runs 6D CHM, max-pools over both scale axes, squashes with a
//! sigmoid, upsamples the 4D result and runs 4D CHM.

use log::warn;

use crate::convnd::{conv_fast, OpCounter};
use crate::error::{ChmError, Result};
use crate::kernel::{build_sharing, KernelGeometry, SharedKernel, SharingScheme};
use crate::tensor::{max_over_axes, DenseTensor, Elementwise, PairResize};

#[derive(Clone, Debug, PartialEq)]
pub struct ChmLayer {
    pub kernel: SharedKernel,
}

impl ChmLayer {
    pub fn new(geometry: KernelGeometry, scheme: SharingScheme) -> Result<Self> {
        Ok(Self { kernel: build_sharing(geometry, scheme)? })
    }

    pub fn rank(&self) -> usize {
        self.kernel.geometry.rank
    }

    /// `bias + (c * k)` with `k` the expanded, share-normalized kernel.
    pub fn forward(&self, c: &DenseTensor, counter: &mut OpCounter) -> Result<DenseTensor> {
        if c.rank() != self.rank() {
            return Err(ChmError::RankMismatch { input: c.rank(), kernel: self.rank() });
        }
        let out = conv_fast(c, &self.kernel.expand_dense(), counter)?;
        Ok(out.map(Elementwise::AddConst(self.kernel.bias)))
    }
}

pub fn chm_forward(layer: &ChmLayer, c: &DenseTensor, counter: &mut OpCounter) -> Result<DenseTensor> {
    layer.forward(c, counter)
}

/// Winning `(source scale, target scale)` pair at every 4D position.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleArgs {
    pub scales: usize,
    /// Row-major over `[H, W, H, W]`; each entry is `m * S + n`.
    pub flat: Vec<usize>,
}

impl ScaleArgs {
    pub fn pair(&self, i: usize) -> (usize, usize) {
        (self.flat[i] / self.scales, self.flat[i] % self.scales)
    }

    /// `S x S` vote counts, row-major over `(m, n)`.
    pub fn counts(&self) -> Vec<u64> {
        let mut c = vec![0u64; self.scales * self.scales];
        self.flat.iter().for_each(|&f| c[f] += 1);
        c
    }
}

/// Max over both scale axes of a `[H, W, S, H, W, S]` volume.
pub fn scale_maxpool(c6: &DenseTensor) -> Result<(DenseTensor, ScaleArgs)> {
    if c6.rank() != 6 {
        return Err(ChmError::RankMismatch { input: c6.rank(), kernel: 6 });
    }
    let s = c6.shape()[2];
    let (values, args) = max_over_axes(c6, &[2, 5])?;
    Ok((values, ScaleArgs { scales: s, flat: args.flat }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchHeadConfig {
    pub kernel_6d: KernelGeometry,
    pub scheme_6d: SharingScheme,
    pub kernel_4d: KernelGeometry,
    pub scheme_4d: SharingScheme,
    /// Output grid is `upsample * H`.
    pub upsample: usize,
}

impl Default for MatchHeadConfig {
    fn default() -> Self {
        Self {
            kernel_6d: KernelGeometry { spatial: 5, scale: 3, rank: 6 },
            scheme_6d: SharingScheme::Psi,
            kernel_4d: KernelGeometry { spatial: 5, scale: 1, rank: 4 },
            scheme_4d: SharingScheme::Psi,
            upsample: 2,
        }
    }
}

impl MatchHeadConfig {
    pub fn layers(&self) -> Result<(ChmLayer, ChmLayer)> {
        Ok((ChmLayer::new(self.kernel_6d, self.scheme_6d)?, ChmLayer::new(self.kernel_4d, self.scheme_4d)?))
    }
}

/// Upsampling of both spatial pairs of a `[H, W, H, W]` tensor.
pub fn upsample_op(shape: &[usize], factor: usize) -> Result<PairResize> {
    let (h, w) = (shape[0] * factor, shape[1] * factor);
    PairResize::new(shape, &[(0, 1), (2, 3)], &[(h, w), (h, w)])
}

pub struct HeadOutput {
    pub corr: DenseTensor,
    pub scale_args: ScaleArgs,
    /// Max-pooled 6D votes before the sigmoid.
    pub pooled: DenseTensor,
}

pub fn match_head(
    c6: &DenseTensor,
    cfg: &MatchHeadConfig,
    layers: (&ChmLayer, &ChmLayer),
    counter: &mut OpCounter,
) -> Result<HeadOutput> {
    let (l6, l4) = layers;
    let voted = l6.forward(c6, counter)?;
    let (pooled, scale_args) = scale_maxpool(&voted)?;
    let squashed = pooled.map(Elementwise::Sigmoid);
    let up = upsample_op(squashed.shape(), cfg.upsample)?.apply(&squashed);
    let corr = l4.forward(&up, counter)?;
    Ok(HeadOutput { corr, scale_args, pooled })
}

/// Voting kernel for the global Hough map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VoteKernel {
    Dirac,
    /// Discretized Gaussian with standard deviation in bins, truncated at
    /// `ceil(3 sigma)` and normalized to unit sum over that window.
    Gaussian { sigma: f64 },
}

/// Global voting map over integer offsets `lo[a] ..= lo[a] + extent[a] - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct VotingMap {
    pub lo: Vec<i64>,
    pub values: DenseTensor,
    pub discarded: usize,
}

impl VotingMap {
    /// Bins `-(e - 1) ..= e - 1` for each extent `e`.
    pub fn for_extents(extents: &[usize]) -> Result<Self> {
        let lo: Vec<i64> = extents.iter().map(|&e| -(e as i64 - 1)).collect();
        let shape: Vec<usize> = extents.iter().map(|&e| 2 * e - 1).collect();
        Ok(Self { lo, values: DenseTensor::zeros(&shape)?, discarded: 0 })
    }

    fn bin(&self, offset: &[i64]) -> Option<usize> {
        let mut flat = 0usize;
        for (a, (&o, &lo)) in offset.iter().zip(&self.lo).enumerate() {
            let e = self.values.shape()[a] as i64;
            let i = o - lo;
            if i < 0 || i >= e {
                return None;
            }
            flat = flat * e as usize + i as usize;
        }
        Some(flat)
    }

    pub fn get(&self, offset: &[i64]) -> Option<f64> {
        self.bin(offset).map(|b| self.values.data()[b])
    }
}

fn gaussian_window(sigma: f64, dims: usize) -> (i64, Vec<(Vec<i64>, f64)>) {
    let r = (3.0 * sigma).ceil().max(0.0) as i64;
    let mut taps = Vec::new();
    let mut idx = vec![-r; dims];
    loop {
        let d2: i64 = idx.iter().map(|v| v * v).sum();
        taps.push((idx.clone(), (-(d2 as f64) / (2.0 * sigma * sigma)).exp()));
        let mut k = dims;
        loop {
            if k == 0 {
                let z: f64 = taps.iter().map(|t| t.1).sum();
                taps.iter_mut().for_each(|t| t.1 /= z);
                return (r, taps);
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] <= r {
                break;
            }
            idx[k] = -r;
        }
    }
}

/// Accumulates `score * kernel(offset - h)` into every bin `h`. Candidates
/// whose offset falls outside the map are discarded and counted.
pub fn rhm_vote(candidates: &[(Vec<i64>, f64)], map: &mut VotingMap, kernel: VoteKernel) {
    let dims = map.lo.len();
    let window = match kernel {
        VoteKernel::Dirac => vec![(vec![0; dims], 1.0)],
        VoteKernel::Gaussian { sigma } => gaussian_window(sigma, dims).1,
    };
    let mut target = vec![0i64; dims];
    for (offset, score) in candidates {
        if map.bin(offset).is_none() {
            map.discarded += 1;
            continue;
        }
        for (d, w) in &window {
            for a in 0..dims {
                target[a] = offset[a] + d[a];
            }
            if let Some(b) = map.bin(&target) {
                map.values.data_mut()[b] += score * w;
            }
        }
    }
    if map.discarded > 0 {
        warn!("{} votes fell outside the Hough map", map.discarded);
    }
}

/// Translation voting map of a `[H, W, H, W]` correlation: every candidate
/// `(x, x')` votes with its score at offset `x' - x`.
pub fn rhm_vote_correlation(c: &DenseTensor, kernel: VoteKernel) -> Result<VotingMap> {
    let (h, w) = four_d(c)?;
    let mut map = VotingMap::for_extents(&[h, w])?;
    let mut cands = Vec::with_capacity(c.len());
    for (flat, &v) in c.data().iter().enumerate() {
        let idx = c.unravel(flat);
        cands.push((vec![idx[2] as i64 - idx[0] as i64, idx[3] as i64 - idx[1] as i64], v));
    }
    rhm_vote(&cands, &mut map, kernel);
    Ok(map)
}

fn four_d(c: &DenseTensor) -> Result<(usize, usize)> {
    if c.rank() != 4 {
        return Err(ChmError::RankMismatch { input: c.rank(), kernel: 4 });
    }
    Ok((c.shape()[0], c.shape()[1]))
}

/// `c(x, x') * v(x' - x)`.
pub fn rhm_rescore(c: &DenseTensor, v: &VotingMap) -> Result<DenseTensor> {
    four_d(c)?;
    let mut out = c.clone();
    for flat in 0..c.len() {
        let idx = c.unravel(flat);
        let off = [idx[2] as i64 - idx[0] as i64, idx[3] as i64 - idx[1] as i64];
        let vote = v.get(&off).ok_or_else(|| {
            ChmError::Config(format!("voting map does not cover offset {off:?}"))
        })?;
        out.data_mut()[flat] *= vote;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnd::conv_naive;
    use crate::kernel::InitMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
        let n = shape.iter().product();
        DenseTensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn delta_layer_is_identity_and_zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = ChmLayer::new(KernelGeometry::new_4d(5).unwrap(), SharingScheme::Psi).unwrap();
        layer.kernel.init(InitMode::Delta, &mut rng);
        let x = random(&[4, 5, 4, 5], &mut rng);
        let mut c = OpCounter::default();
        assert_eq!(layer.forward(&x, &mut c).unwrap(), x);
        layer.kernel.params.iter_mut().for_each(|p| *p = 0.0);
        layer.kernel.bias = 0.25;
        assert!(layer.forward(&x, &mut c).unwrap().data().iter().all(|&v| v == 0.25));
        let bad = random(&[3, 3, 3], &mut rng);
        assert!(layer.forward(&bad, &mut c).is_err());
    }

    #[test]
    fn forward_matches_naive_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = ChmLayer::new(KernelGeometry::new_6d(3, 3).unwrap(), SharingScheme::Psi).unwrap();
        layer.kernel.params.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
        layer.kernel.bias = -0.3;
        let x = random(&[3, 4, 2, 4, 3, 2], &mut rng);
        let mut c = OpCounter::default();
        let a = layer.forward(&x, &mut c).unwrap();
        let b = conv_naive(&x, &layer.kernel.expand_dense(), &mut c).unwrap().map(Elementwise::AddConst(-0.3));
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn scale_maxpool_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 3, 1, 3, 3, 1], &mut rng);
        let (v, a) = scale_maxpool(&x).unwrap();
        assert_eq!(v.data(), x.data());
        assert!(a.flat.iter().all(|&f| f == 0));

        let mut y = random(&[2, 2, 3, 2, 2, 3], &mut rng);
        for flat in 0..y.len() {
            let idx = y.unravel(flat);
            if idx[2] == 2 && idx[5] == 0 {
                y.data_mut()[flat] += 5.0;
            }
        }
        let (_, a) = scale_maxpool(&y).unwrap();
        assert!((0..a.flat.len()).all(|i| a.pair(i) == (2, 0)));
        assert_eq!(a.counts().iter().sum::<u64>(), 16);
    }

    #[test]
    fn head_with_delta_layers_on_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = MatchHeadConfig {
            kernel_6d: KernelGeometry::new_6d(3, 3).unwrap(),
            kernel_4d: KernelGeometry::new_4d(3).unwrap(),
            ..MatchHeadConfig::default()
        };
        let (mut l6, mut l4) = cfg.layers().unwrap();
        l6.kernel.init(InitMode::Delta, &mut rng);
        l4.kernel.init(InitMode::Delta, &mut rng);
        let mut c = OpCounter::default();
        for value in [0.4, 0.0] {
            let x = DenseTensor::new(&[3, 3, 2, 3, 3, 2], value).unwrap();
            let out = match_head(&x, &cfg, (&l6, &l4), &mut c).unwrap();
            assert_eq!(out.corr.shape(), &[6, 6, 6, 6]);
            let expect = crate::tensor::sigmoid(value);
            assert!(out.corr.data().iter().all(|v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn rhm_dirac_and_gaussian_votes() {
        let mut map = VotingMap::for_extents(&[4]).unwrap();
        rhm_vote(&[(vec![1], 0.7)], &mut map, VoteKernel::Dirac);
        assert_eq!(map.get(&[1]), Some(0.7));
        assert_eq!(map.values.sum(), 0.7);
        rhm_vote(&[(vec![1], 0.2)], &mut map, VoteKernel::Dirac);
        assert!((map.get(&[1]).unwrap() - 0.9).abs() < 1e-15);

        let mut g = VotingMap::for_extents(&[8]).unwrap();
        rhm_vote(&[(vec![0], 1.0)], &mut g, VoteKernel::Gaussian { sigma: 1.0 });
        // Window -3..=3: normalizer 1 + 2(e^-0.5 + e^-2 + e^-4.5).
        let z = 1.0 + 2.0 * ((-0.5f64).exp() + (-2.0f64).exp() + (-4.5f64).exp());
        assert!((g.get(&[1]).unwrap() - (-0.5f64).exp() / z).abs() < 1e-15);
        assert!((g.get(&[0]).unwrap() - 1.0 / z).abs() < 1e-15);

        let mut d = VotingMap::for_extents(&[2]).unwrap();
        rhm_vote(&[(vec![5], 1.0)], &mut d, VoteKernel::Dirac);
        assert_eq!(d.discarded, 1);
    }

    #[test]
    fn rhm_rescore_identity_zero_and_planted_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random(&[3, 3, 3, 3], &mut rng);
        let mut ones = VotingMap::for_extents(&[3, 3]).unwrap();
        ones.values.data_mut().iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(rhm_rescore(&c, &ones).unwrap(), c);
        let zeros = VotingMap::for_extents(&[3, 3]).unwrap();
        assert!(rhm_rescore(&c, &zeros).unwrap().data().iter().all(|&v| v == 0.0));

        // Five matches share offset (1, 1); scattered outliers score higher
        // individually but disagree on their offsets.
        let mut p = DenseTensor::zeros(&[4, 4, 4, 4]).unwrap();
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)] {
            p.set(&[i, j, i + 1, j + 1], 0.6);
        }
        p.set(&[0, 3, 3, 0], 0.9);
        p.set(&[3, 0, 0, 2], 0.9);
        let v = rhm_vote_correlation(&p, VoteKernel::Dirac).unwrap();
        let r = rhm_rescore(&p, &v).unwrap();
        let best = r.data().iter().enumerate().fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
        let idx = r.unravel(best.0);
        assert_eq!((idx[2] as i64 - idx[0] as i64, idx[3] as i64 - idx[1] as i64), (1, 1));
    }
}
