//! Parameter-shared kernels for CHM layers.
//!
//! A dense kernel position pairs a source-window offset `z` with a
//! target-window offset `z'` (each a spatial offset plus, for rank-6
//! kernels, a scale offset). Sharing schemes assign every position a class
//! key built from integer group-wise norms:
//!
//! * `full`: the position itself.
//! * `iso`: the offset `z' - z` as (squared spatial norm, |scale diff|).
//! * `psi`: the offset norms plus the distances of `z` and `z'` from the
//!   kernel center, kept as an unordered pair within each group.
//!
//! Shared values are divided by their multiplicity when expanded, so
//! gradients through a class are normalized sums of the member gradients.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ChmError, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SharingScheme {
    Full,
    Iso,
    Psi,
}

impl SharingScheme {
    pub fn name(self) -> &'static str {
        match self {
            SharingScheme::Full => "full",
            SharingScheme::Iso => "iso",
            SharingScheme::Psi => "psi",
        }
    }
}

impl std::str::FromStr for SharingScheme {
    type Err = ChmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SharingScheme::Full),
            "iso" => Ok(SharingScheme::Iso),
            "psi" => Ok(SharingScheme::Psi),
            other => Err(ChmError::Parse(format!("unknown sharing scheme `{other}`"))),
        }
    }
}

/// Kernel extents. Rank-4 kernels have shape `(k, k, k, k)`; rank-6 kernels
/// `(k, k, s, k, k, s)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelGeometry {
    pub spatial: usize,
    pub scale: usize,
    pub rank: usize,
}

impl KernelGeometry {
    pub fn new_4d(spatial: usize) -> Result<Self> {
        let g = Self { spatial, scale: 1, rank: 4 };
        g.validate()?;
        Ok(g)
    }

    pub fn new_6d(spatial: usize, scale: usize) -> Result<Self> {
        let g = Self { spatial, scale, rank: 6 };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial == 0 || self.spatial.is_multiple_of(2) {
            return Err(ChmError::InvalidGeometry(format!(
                "spatial extent {} must be odd",
                self.spatial
            )));
        }
        match self.rank {
            4 if self.scale == 1 => Ok(()),
            6 if self.scale % 2 == 1 => Ok(()),
            4 => Err(ChmError::InvalidGeometry("rank-4 kernels have no scale axis".into())),
            6 => Err(ChmError::InvalidGeometry(format!(
                "scale extent {} must be odd",
                self.scale
            ))),
            r => Err(ChmError::InvalidGeometry(format!("rank {r} not supported (4 or 6)"))),
        }
    }

    /// Extents of one side (source or target) of the kernel.
    pub fn half_shape(&self) -> Vec<usize> {
        if self.rank == 4 {
            vec![self.spatial, self.spatial]
        } else {
            vec![self.spatial, self.spatial, self.scale]
        }
    }

    pub fn dense_shape(&self) -> Vec<usize> {
        let half = self.half_shape();
        half.iter().chain(half.iter()).copied().collect()
    }

    pub fn dense_len(&self) -> usize {
        self.dense_shape().iter().product()
    }

    /// Offsets from the kernel center for both halves of a dense multi-index.
    fn offsets(&self, index: &[usize]) -> (Vec<i64>, Vec<i64>) {
        let half = self.half_shape();
        let n = half.len();
        let off = |i: usize, e: usize| i as i64 - (e / 2) as i64;
        let z = (0..n).map(|k| off(index[k], half[k])).collect();
        let zp = (0..n).map(|k| off(index[n + k], half[k])).collect();
        (z, zp)
    }
}

/// Group-wise distance of an integer offset `(dy, dx[, ds])`: squared
/// spatial norm and absolute scale offset. Integer keys keep class equality
/// exact.
pub fn group_distance(offset: &[i64]) -> (i64, i64) {
    let spatial = offset[0] * offset[0] + offset[1] * offset[1];
    let scale = if offset.len() > 2 { offset[2].abs() } else { 0 };
    (spatial, scale)
}

fn class_key(geom: &KernelGeometry, scheme: SharingScheme, index: &[usize]) -> Vec<i64> {
    match scheme {
        SharingScheme::Full => index.iter().map(|&i| i as i64).collect(),
        SharingScheme::Iso | SharingScheme::Psi => {
            let (z, zp) = geom.offsets(index);
            let diff: Vec<i64> = zp.iter().zip(&z).map(|(b, a)| b - a).collect();
            let (ds, dsc) = group_distance(&diff);
            if scheme == SharingScheme::Iso {
                return vec![ds, dsc];
            }
            let (zs, zsc) = group_distance(&z);
            let (ps, psc) = group_distance(&zp);
            vec![ds, dsc, zs.min(ps), zs.max(ps), zsc.min(psc), zsc.max(psc)]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedKernel {
    pub geometry: KernelGeometry,
    pub scheme: SharingScheme,
    pub params: Vec<f64>,
    /// Class index of every dense position, in row-major order.
    pub class_of: Vec<usize>,
    pub share_count: Vec<usize>,
    /// Class keys, sorted lexicographically; `keys[c]` belongs to class `c`.
    pub keys: Vec<Vec<i64>>,
    pub bias: f64,
}

/// Enumerates the dense positions of `geometry` and groups them by `scheme`.
/// Parameters start at zero.
pub fn build_sharing(geometry: KernelGeometry, scheme: SharingScheme) -> Result<SharedKernel> {
    geometry.validate()?;
    let shape = geometry.dense_shape();
    let n = geometry.dense_len();
    let mut raw_keys = Vec::with_capacity(n);
    let mut index = vec![0usize; shape.len()];
    for _ in 0..n {
        raw_keys.push(class_key(&geometry, scheme, &index));
        for k in (0..shape.len()).rev() {
            index[k] += 1;
            if index[k] < shape[k] {
                break;
            }
            index[k] = 0;
        }
    }
    let mut classes: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
    for key in &raw_keys {
        *classes.entry(key.clone()).or_insert(0) += 1;
    }
    let keys: Vec<Vec<i64>> = classes.keys().cloned().collect();
    let share_count: Vec<usize> = classes.values().copied().collect();
    let lookup: BTreeMap<&Vec<i64>, usize> = keys.iter().enumerate().map(|(c, k)| (k, c)).collect();
    let class_of = raw_keys.iter().map(|k| lookup[k]).collect();
    Ok(SharedKernel {
        geometry,
        scheme,
        params: vec![0.0; keys.len()],
        class_of,
        share_count,
        keys,
        bias: 0.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitMode {
    Delta,
    NearIdentity { sigma: f64 },
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::NearIdentity { sigma: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpFormat {
    Classes,
    DenseMaps,
}

impl SharedKernel {
    pub fn n_classes(&self) -> usize {
        self.params.len()
    }

    /// Class of the center position `z = z' = 0`.
    pub fn center_class(&self) -> usize {
        let center: usize = {
            let shape = self.geometry.dense_shape();
            shape.iter().fold(0, |acc, &e| acc * e + e / 2)
        };
        self.class_of[center]
    }

    /// Effective per-class weight after share-count normalization.
    pub fn effective(&self, class: usize) -> f64 {
        self.params[class] / self.share_count[class] as f64
    }

    /// Dense kernel with each position holding `param / multiplicity`.
    pub fn expand_dense(&self) -> DenseTensor {
        let data = self.class_of.iter().map(|&c| self.effective(c)).collect();
        DenseTensor::from_vec(&self.geometry.dense_shape(), data).expect("geometry is valid")
    }

    /// Adjoint of [`SharedKernel::expand_dense`].
    pub fn accumulate_param_grad(&self, dense_grad: &DenseTensor) -> Result<Vec<f64>> {
        let shape = self.geometry.dense_shape();
        if dense_grad.shape() != shape.as_slice() {
            return Err(ChmError::ShapeMismatch { expected: shape, got: dense_grad.shape().to_vec() });
        }
        let mut grad = vec![0.0; self.n_classes()];
        for (&c, &g) in self.class_of.iter().zip(dense_grad.data()) {
            grad[c] += g;
        }
        for (g, &m) in grad.iter_mut().zip(&self.share_count) {
            *g /= m as f64;
        }
        Ok(grad)
    }

    /// Resets parameters: the class holding the center position gets a dense
    /// value of 1, everything else 0. For `full` and `psi` that class is the
    /// center alone and the layer becomes an identity convolution; for `iso`
    /// it is the whole zero-offset diagonal. `NearIdentity` adds zero-mean
    /// Gaussian noise to every class.
    pub fn init<R: Rng + ?Sized>(&mut self, mode: InitMode, rng: &mut R) {
        self.params.iter_mut().for_each(|p| *p = 0.0);
        self.bias = 0.0;
        let c = self.center_class();
        self.params[c] = self.share_count[c] as f64;
        if let InitMode::NearIdentity { sigma } = mode {
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
                for p in self.params.iter_mut() {
                    *p += normal.sample(rng);
                }
            }
        }
    }

    pub fn dump(&self, format: DumpFormat) -> String {
        let g = &self.geometry;
        let mut out = String::new();
        writeln!(out, "scheme rank H_k W_k S_k n_classes bias").unwrap();
        writeln!(
            out,
            "{} {} {} {} {} {} {:.8e}",
            self.scheme.name(),
            g.rank,
            g.spatial,
            g.spatial,
            g.scale,
            self.n_classes(),
            self.bias
        )
        .unwrap();
        match format {
            DumpFormat::Classes => {
                writeln!(out, "# key... multiplicity param effective").unwrap();
                for (c, key) in self.keys.iter().enumerate() {
                    for k in key {
                        write!(out, "{k} ").unwrap();
                    }
                    writeln!(
                        out,
                        "{} {:.8e} {:.8e}",
                        self.share_count[c],
                        self.params[c],
                        self.effective(c)
                    )
                    .unwrap();
                }
            }
            DumpFormat::DenseMaps => self.write_dense_maps(&mut out),
        }
        out
    }

    /// Scale-part of a class key; positions with the same scale part form one
    /// 4D block in the dense dump.
    fn scale_block_key(&self, zs: i64, zps: i64) -> Vec<i64> {
        match self.scheme {
            SharingScheme::Full => vec![zs, zps],
            SharingScheme::Iso => vec![(zps - zs).abs()],
            SharingScheme::Psi => {
                vec![(zps - zs).abs(), zs.abs().min(zps.abs()), zs.abs().max(zps.abs())]
            }
        }
    }

    /// Scale-offset blocks of the dense kernel, each with a representative
    /// `(z_s, z'_s)` pair. Rank-4 kernels have a single block.
    pub fn scale_blocks(&self) -> Vec<(Vec<i64>, (i64, i64))> {
        if self.geometry.rank == 4 {
            return vec![(Vec::new(), (0, 0))];
        }
        let half = (self.geometry.scale / 2) as i64;
        let mut blocks: BTreeMap<Vec<i64>, (i64, i64)> = BTreeMap::new();
        for zs in -half..=half {
            for zps in -half..=half {
                blocks.entry(self.scale_block_key(zs, zps)).or_insert((zs, zps));
            }
        }
        blocks.into_iter().collect()
    }

    fn write_dense_maps(&self, out: &mut String) {
        let dense = self.expand_dense();
        let k = self.geometry.spatial;
        let half_s = (self.geometry.scale / 2) as i64;
        for (key, (zs, zps)) in self.scale_blocks() {
            let key_str: Vec<String> = key.iter().map(|v| v.to_string()).collect();
            writeln!(out, "# block scale_key=[{}] z_s={} z'_s={}", key_str.join(","), zs, zps).unwrap();
            for zy in 0..k {
                for zx in 0..k {
                    let c = (k / 2) as i64;
                    writeln!(out, "# map z=({},{})", zy as i64 - c, zx as i64 - c).unwrap();
                    for py in 0..k {
                        let row: Vec<String> = (0..k)
                            .map(|px| {
                                let idx = if self.geometry.rank == 4 {
                                    vec![zy, zx, py, px]
                                } else {
                                    vec![
                                        zy,
                                        zx,
                                        (zs + half_s) as usize,
                                        py,
                                        px,
                                        (zps + half_s) as usize,
                                    ]
                                };
                                format!("{:.8e}", dense.get(&idx))
                            })
                            .collect();
                        writeln!(out, "{}", row.join(" ")).unwrap();
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn count(g: KernelGeometry, s: SharingScheme) -> usize {
        build_sharing(g, s).unwrap().n_classes()
    }

    #[test]
    fn group_distance_examples() {
        assert_eq!(group_distance(&[0, 0, 0]), (0, 0));
        assert_eq!(group_distance(&[3, 4, 1]), (25, 1));
        assert_eq!(group_distance(&[-2, 2, -2]), (8, 2));
        assert_eq!(group_distance(&[1, 1]), (2, 0));
    }

    #[test]
    fn published_class_counts() {
        let g4 = KernelGeometry::new_4d(5).unwrap();
        let g6 = KernelGeometry::new_6d(5, 3).unwrap();
        assert_eq!(count(g4, SharingScheme::Iso), 15);
        assert_eq!(count(g4, SharingScheme::Psi), 55);
        assert_eq!(count(g4, SharingScheme::Full), 625);
        assert_eq!(count(g6, SharingScheme::Iso), 45);
        assert_eq!(count(g6, SharingScheme::Psi), 220);
        assert_eq!(count(g6, SharingScheme::Full), 5625);
        let g1 = KernelGeometry::new_4d(1).unwrap();
        for s in [SharingScheme::Full, SharingScheme::Iso, SharingScheme::Psi] {
            assert_eq!(count(g1, s), 1);
        }
    }

    #[test]
    fn invalid_geometry_rejected() {
        assert!(KernelGeometry::new_4d(4).is_err());
        assert!(KernelGeometry::new_6d(5, 2).is_err());
        assert!(KernelGeometry { spatial: 3, scale: 1, rank: 5 }.validate().is_err());
    }

    #[test]
    fn share_counts_cover_all_positions() {
        for s in [SharingScheme::Full, SharingScheme::Iso, SharingScheme::Psi] {
            let k = build_sharing(KernelGeometry::new_6d(3, 3).unwrap(), s).unwrap();
            assert_eq!(k.share_count.iter().sum::<usize>(), 729);
            assert!(k.share_count.iter().all(|&m| m >= 1));
            let mut tally = vec![0; k.n_classes()];
            k.class_of.iter().for_each(|&c| tally[c] += 1);
            assert_eq!(tally, k.share_count);
        }
    }

    #[test]
    fn expand_full_is_identity_on_params() {
        let mut k = build_sharing(KernelGeometry::new_4d(3).unwrap(), SharingScheme::Full).unwrap();
        k.params.iter_mut().enumerate().for_each(|(i, p)| *p = i as f64 * 0.5);
        assert_eq!(k.expand_dense().data(), k.params.as_slice());
        let g = DenseTensor::from_vec(&[3, 3, 3, 3], (0..81).map(|i| i as f64).collect()).unwrap();
        assert_eq!(k.accumulate_param_grad(&g).unwrap(), g.data());
    }

    #[test]
    fn iso_zero_offset_class_spreads_over_nine() {
        let mut k = build_sharing(KernelGeometry::new_4d(3).unwrap(), SharingScheme::Iso).unwrap();
        let zero = k.keys.iter().position(|key| key == &vec![0, 0]).unwrap();
        assert_eq!(k.share_count[zero], 9);
        k.params[zero] = 9.0;
        let dense = k.expand_dense();
        let ones = dense.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 9);
        assert_eq!(dense.sum(), 9.0);
        for flat in 0..dense.len() {
            let idx = dense.unravel(flat);
            let on_diag = idx[0] == idx[2] && idx[1] == idx[3];
            assert_eq!(dense.data()[flat], if on_diag { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn grad_of_all_ones_is_one_per_class() {
        let k = build_sharing(KernelGeometry::new_6d(3, 3).unwrap(), SharingScheme::Psi).unwrap();
        let g = DenseTensor::new(&k.geometry.dense_shape(), 1.0).unwrap();
        let grad = k.accumulate_param_grad(&g).unwrap();
        assert!(grad.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let bad = DenseTensor::new(&[3, 3, 3, 3], 1.0).unwrap();
        assert!(matches!(k.accumulate_param_grad(&bad), Err(ChmError::ShapeMismatch { .. })));
    }

    #[test]
    fn accumulate_matches_finite_differences() {
        // Loss L(params) = <w, expand(params)> + 0.5 * |expand(params)|^2.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut k = build_sharing(KernelGeometry::new_4d(3).unwrap(), SharingScheme::Psi).unwrap();
        k.params.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
        let w: Vec<f64> = (0..81).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |k: &SharedKernel| {
            let d = k.expand_dense();
            d.data().iter().zip(&w).map(|(a, b)| a * b + 0.5 * a * a).sum::<f64>()
        };
        let d = k.expand_dense();
        let dense_grad =
            DenseTensor::from_vec(&[3, 3, 3, 3], d.data().iter().zip(&w).map(|(a, b)| a + b).collect())
                .unwrap();
        let grad = k.accumulate_param_grad(&dense_grad).unwrap();
        let h = 1e-6;
        for c in 0..k.n_classes() {
            let mut kp = k.clone();
            kp.params[c] += h;
            let mut km = k.clone();
            km.params[c] -= h;
            let fd = (loss(&kp) - loss(&km)) / (2.0 * h);
            assert!((fd - grad[c]).abs() < 1e-8, "class {c}: fd {fd} vs {}", grad[c]);
        }
    }

    #[test]
    fn delta_init_has_unit_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut k = build_sharing(KernelGeometry::new_4d(5).unwrap(), SharingScheme::Full).unwrap();
        k.init(InitMode::Delta, &mut rng);
        let d = k.expand_dense();
        assert_eq!(d.get(&[2, 2, 2, 2]), 1.0);
        assert_eq!(d.sum(), 1.0);

        let mut psi = build_sharing(KernelGeometry::new_6d(5, 3).unwrap(), SharingScheme::Psi).unwrap();
        psi.init(InitMode::Delta, &mut rng);
        let dp = psi.expand_dense();
        // psi keeps the center position in a class of its own.
        assert_eq!(dp.get(&[2, 2, 1, 2, 2, 1]), 1.0);
        assert_eq!(dp.sum(), 1.0);

        let mut a = psi.clone();
        a.init(InitMode::NearIdentity { sigma: 0.0 }, &mut rng);
        assert_eq!(a.params, psi.params);
    }

    #[test]
    fn psi_dump_has_220_rows_and_four_blocks() {
        let k = build_sharing(KernelGeometry::new_6d(5, 3).unwrap(), SharingScheme::Psi).unwrap();
        let text = k.dump(DumpFormat::Classes);
        let rows = text.lines().skip(2).filter(|l| !l.starts_with('#')).count();
        assert_eq!(rows, 220);
        assert_eq!(k.scale_blocks().len(), 4);
        let iso = build_sharing(KernelGeometry::new_6d(5, 3).unwrap(), SharingScheme::Iso).unwrap();
        assert_eq!(iso.scale_blocks().len(), 3);
        let full = build_sharing(KernelGeometry::new_6d(5, 3).unwrap(), SharingScheme::Full).unwrap();
        assert_eq!(full.scale_blocks().len(), 9);
    }

    #[test]
    fn delta_dense_maps_single_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut k = build_sharing(KernelGeometry::new_4d(3).unwrap(), SharingScheme::Psi).unwrap();
        k.init(InitMode::Delta, &mut rng);
        let text = k.dump(DumpFormat::DenseMaps);
        let values: Vec<f64> = text
            .lines()
            .skip(2)
            .filter(|l| !l.starts_with('#'))
            .flat_map(|l| l.split_whitespace().map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(values.len(), 81);
        assert_eq!(values.iter().filter(|&&v| v == 1.0).count(), 1);
        // center map z=(0,0) is the fifth map; its center entry is index 4*9+4
        assert_eq!(values[4 * 9 + 4], 1.0);
    }
}
