//! Dense row-major N-dimensional arrays of `f64`.
//!
//! Everything downstream (features, correlation volumes, dense kernels,
//! flow grids) is carried in a [`DenseTensor`]. The layout is fixed to
//! row-major with the last axis fastest; the fast convolution folds leading
//! axes into a batch dimension and relies on this.

use crate::error::{ChmError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Pointwise maps used by the matching head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Scale(f64),
    AddConst(f64),
}

impl Elementwise {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Elementwise::Relu => x.max(0.0),
            Elementwise::Sigmoid => sigmoid(x),
            Elementwise::Scale(c) => x * c,
            Elementwise::AddConst(c) => x + c,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(ChmError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

/// Row-major strides for `shape` (last axis has stride 1).
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

impl DenseTensor {
    pub fn new(shape: &[usize], fill: f64) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self { shape: shape.to_vec(), data: vec![fill; n] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(ChmError::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Tensor of the same shape as `self` filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self { shape: self.shape.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Flat offset of a multi-index. Panics if the index is out of bounds.
    pub fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (k, (&i, &e)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < e, "index {i} out of bounds for axis {k} (extent {e})");
            flat = flat * e + i;
        }
        flat
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut index = vec![0; self.shape.len()];
        for k in (0..self.shape.len()).rev() {
            index[k] = flat % self.shape[k];
            flat /= self.shape[k];
        }
        index
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let f = self.flat_index(index);
        self.data[f] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: Elementwise) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f.apply(x)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}

/// Align-corners linear interpolation weights for one axis.
#[derive(Clone, Debug)]
pub struct LinearResample {
    pub in_len: usize,
    pub out_len: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl LinearResample {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len)
            .map(|o| {
                if in_len == 1 {
                    return (0, 0, 0.0);
                }
                let pos = if out_len == 1 {
                    0.0
                } else {
                    o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
                };
                let i0 = (pos.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect();
        Self { in_len, out_len, taps }
    }

    /// Resamples `axis` of `t`.
    pub fn apply(&self, t: &DenseTensor, axis: usize) -> DenseTensor {
        let shape = t.shape();
        debug_assert_eq!(shape[axis], self.in_len);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = self.out_len;
        let mut out = vec![0.0; outer * self.out_len * inner];
        let src = t.data();
        for b in 0..outer {
            let src_block = &src[b * self.in_len * inner..(b + 1) * self.in_len * inner];
            let dst_block = &mut out[b * self.out_len * inner..(b + 1) * self.out_len * inner];
            for (o, &(i0, i1, w)) in self.taps.iter().enumerate() {
                let dst = &mut dst_block[o * inner..(o + 1) * inner];
                let r0 = &src_block[i0 * inner..(i0 + 1) * inner];
                let r1 = &src_block[i1 * inner..(i1 + 1) * inner];
                for ((d, &a), &c) in dst.iter_mut().zip(r0).zip(r1) {
                    *d = a + w * (c - a);
                }
            }
        }
        DenseTensor { shape: out_shape, data: out }
    }

    /// Adjoint of [`LinearResample::apply`]: maps a gradient on the resized
    /// axis back onto the original extent.
    pub fn adjoint(&self, grad: &DenseTensor, axis: usize) -> DenseTensor {
        let shape = grad.shape();
        debug_assert_eq!(shape[axis], self.out_len);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut in_shape = shape.to_vec();
        in_shape[axis] = self.in_len;
        let mut out = vec![0.0; outer * self.in_len * inner];
        let src = grad.data();
        for b in 0..outer {
            let g_block = &src[b * self.out_len * inner..(b + 1) * self.out_len * inner];
            let dst_block = &mut out[b * self.in_len * inner..(b + 1) * self.in_len * inner];
            for (o, &(i0, i1, w)) in self.taps.iter().enumerate() {
                let g = &g_block[o * inner..(o + 1) * inner];
                for (k, &gv) in g.iter().enumerate() {
                    dst_block[i0 * inner + k] += (1.0 - w) * gv;
                    dst_block[i1 * inner + k] += w * gv;
                }
            }
        }
        DenseTensor { shape: in_shape, data: out }
    }
}

/// A set of (row, col) axis pairs and their target extents, resized with
/// separable align-corners bilinear interpolation.
#[derive(Clone, Debug)]
pub struct PairResize {
    steps: Vec<(usize, LinearResample)>,
    out_shape: Vec<usize>,
}

impl PairResize {
    pub fn new(
        in_shape: &[usize],
        pair_axes: &[(usize, usize)],
        new_extents: &[(usize, usize)],
    ) -> Result<Self> {
        check_shape(in_shape)?;
        if pair_axes.len() != new_extents.len() || pair_axes.is_empty() {
            return Err(ChmError::InvalidGeometry(format!(
                "{} axis pairs but {} extents",
                pair_axes.len(),
                new_extents.len()
            )));
        }
        let rank = in_shape.len();
        let mut out_shape = in_shape.to_vec();
        let mut steps = Vec::new();
        for (&(ra, ca), &(rh, cw)) in pair_axes.iter().zip(new_extents) {
            for (axis, ext) in [(ra, rh), (ca, cw)] {
                if axis >= rank {
                    return Err(ChmError::InvalidAxis { axis, rank });
                }
                if ext == 0 {
                    return Err(ChmError::InvalidShape(vec![ext]));
                }
                steps.push((axis, LinearResample::new(in_shape[axis], ext)));
                out_shape[axis] = ext;
            }
        }
        Ok(Self { steps, out_shape })
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn apply(&self, t: &DenseTensor) -> DenseTensor {
        let mut cur = t.clone();
        for (axis, r) in &self.steps {
            if r.in_len != r.out_len {
                cur = r.apply(&cur, *axis);
            }
        }
        cur
    }

    pub fn adjoint(&self, grad: &DenseTensor) -> DenseTensor {
        let mut cur = grad.clone();
        for (axis, r) in self.steps.iter().rev() {
            if r.in_len != r.out_len {
                cur = r.adjoint(&cur, *axis);
            }
        }
        cur
    }
}

/// Bilinear resize of one or more (row, col) axis pairs, align-corners.
pub fn resize_bilinear_pairs(
    t: &DenseTensor,
    pair_axes: &[(usize, usize)],
    new_extents: &[(usize, usize)],
) -> Result<DenseTensor> {
    Ok(PairResize::new(t.shape(), pair_axes, new_extents)?.apply(t))
}

/// Argmax positions produced by [`max_over_axes`]. Each entry is the flat
/// index within the reduced sub-block (row-major over the reduced axes in
/// ascending axis order).
#[derive(Clone, Debug, PartialEq)]
pub struct ArgMax {
    pub shape: Vec<usize>,
    pub reduced_extents: Vec<usize>,
    pub flat: Vec<usize>,
}

impl ArgMax {
    /// Index tuple over the reduced axes for output element `i`.
    pub fn tuple(&self, i: usize) -> Vec<usize> {
        let mut f = self.flat[i];
        let mut out = vec![0; self.reduced_extents.len()];
        for k in (0..out.len()).rev() {
            out[k] = f % self.reduced_extents[k];
            f /= self.reduced_extents[k];
        }
        out
    }
}

/// Maximum over `axes`. Ties keep the smallest flat index.
pub fn max_over_axes(t: &DenseTensor, axes: &[usize]) -> Result<(DenseTensor, ArgMax)> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(ChmError::InvalidAxis { axis: a, rank });
        }
        if seen[a] {
            return Err(ChmError::InvalidGeometry(format!("axis {a} listed twice")));
        }
        seen[a] = true;
    }
    let kept: Vec<usize> = (0..rank).filter(|a| !seen[*a]).collect();
    let mut reduced: Vec<usize> = axes.to_vec();
    reduced.sort_unstable();
    let out_shape: Vec<usize> =
        if kept.is_empty() { vec![1] } else { kept.iter().map(|&a| t.shape()[a]).collect() };
    let reduced_extents: Vec<usize> = reduced.iter().map(|&a| t.shape()[a]).collect();
    let n_out: usize = out_shape.iter().product();
    let mut values = vec![f64::NEG_INFINITY; n_out];
    let mut args = vec![0usize; n_out];
    let strides = t.strides();
    let kept_strides = strides_of(&out_shape);
    let red_strides = strides_of(&reduced_extents);
    // Walk the input in flat order so the first maximum seen wins ties.
    let mut idx = vec![0usize; rank];
    for (flat, &v) in t.data().iter().enumerate() {
        let mut rem = flat;
        for k in 0..rank {
            idx[k] = rem / strides[k];
            rem %= strides[k];
        }
        let o: usize = if kept.is_empty() {
            0
        } else {
            kept.iter().zip(&kept_strides).map(|(&a, &s)| idx[a] * s).sum()
        };
        if v > values[o] {
            values[o] = v;
            args[o] = reduced.iter().zip(&red_strides).map(|(&a, &s)| idx[a] * s).sum();
        }
    }
    Ok((
        DenseTensor { shape: out_shape.clone(), data: values },
        ArgMax { shape: out_shape, reduced_extents, flat: args },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_fills_and_rejects_zero_extent() {
        let t = DenseTensor::new(&[2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        assert_eq!(DenseTensor::new(&[3], 1.0).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(matches!(DenseTensor::new(&[2, 0], 0.0), Err(ChmError::InvalidShape(_))));
        assert!(DenseTensor::new(&[], 0.0).is_err());
    }

    #[test]
    fn elementwise_maps() {
        let t = DenseTensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(t.map(Elementwise::Relu).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert_eq!(t.map(Elementwise::Scale(2.0)).data(), &[-2.0, 0.0, 4.0]);
        assert_eq!(t.map(Elementwise::AddConst(1.0)).data(), &[0.0, 1.0, 3.0]);
    }

    #[test]
    fn bilinear_2x2_to_3x3() {
        let t = DenseTensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = resize_bilinear_pairs(&t, &[(0, 1)], &[(3, 3)]).unwrap();
        assert_eq!(r.data(), &[1.0, 1.5, 2.0, 2.0, 2.5, 3.0, 3.0, 3.5, 4.0]);
        let same = resize_bilinear_pairs(&t, &[(0, 1)], &[(2, 2)]).unwrap();
        assert_eq!(same, t);
        assert!(matches!(
            resize_bilinear_pairs(&t, &[(0, 5)], &[(2, 2)]),
            Err(ChmError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn resize_preserves_constants_4d() {
        let t = DenseTensor::new(&[3, 4, 2, 5], 0.7).unwrap();
        let r = resize_bilinear_pairs(&t, &[(0, 1), (2, 3)], &[(7, 2), (6, 6)]).unwrap();
        assert_eq!(r.shape(), &[7, 2, 6, 6]);
        assert!(r.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn max_over_axes_examples() {
        let t = DenseTensor::from_vec(&[2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (v, a) = max_over_axes(&t, &[0]).unwrap();
        assert_eq!(v.data(), &[3.0, 5.0]);
        assert_eq!(a.flat, vec![1, 0]);

        let s = DenseTensor::from_vec(&[1, 3], vec![4.0, -1.0, 2.0]).unwrap();
        let (v, _) = max_over_axes(&s, &[0]).unwrap();
        assert_eq!(v.data(), s.data());

        let tie = DenseTensor::from_vec(&[1, 2], vec![2.0, 2.0]).unwrap();
        let (v, a) = max_over_axes(&tie, &[1]).unwrap();
        assert_eq!(v.data(), &[2.0]);
        assert_eq!(a.flat, vec![0]);
    }

    fn shape_strategy(max_rank: usize) -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..4, 1..=max_rank)
    }

    proptest! {
        #[test]
        fn flat_index_roundtrip(shape in shape_strategy(6), seed in 0usize..10_000) {
            let t = DenseTensor::zeros(&shape).unwrap();
            let flat = seed % t.len();
            let idx = t.unravel(flat);
            let strides = t.strides();
            let manual: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            prop_assert_eq!(manual, flat);
            prop_assert_eq!(t.flat_index(&idx), flat);
            prop_assert_eq!(*strides.last().unwrap(), 1);
        }

        #[test]
        fn bilinear_exact_on_affine(h in 2usize..6, w in 2usize..6, nh in 1usize..9, nw in 1usize..9,
                                    a in -2.0f64..2.0, b in -2.0f64..2.0, c in -1.0f64..1.0) {
            // f(y, x) = a*y_n + b*x_n + c with normalised coordinates in [0, 1].
            let norm = |i: usize, n: usize| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let mut data = Vec::new();
            for y in 0..h { for x in 0..w { data.push(a * norm(y, h) + b * norm(x, w) + c); } }
            let t = DenseTensor::from_vec(&[h, w], data).unwrap();
            let r = resize_bilinear_pairs(&t, &[(0, 1)], &[(nh, nw)]).unwrap();
            for y in 0..nh { for x in 0..nw {
                let expect = a * norm(y, nh) + b * norm(x, nw) + c;
                prop_assert!((r.get(&[y, x]) - expect).abs() < 1e-12);
            }}
        }

        #[test]
        fn resize_adjoint_identity(h in 1usize..5, w in 1usize..5, nh in 1usize..7, nw in 1usize..7, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rs = PairResize::new(&[h, w], &[(0, 1)], &[(nh, nw)]).unwrap();
            let u = DenseTensor::from_vec(&[h, w], (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let v = DenseTensor::from_vec(&[nh, nw], (0..nh * nw).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let lhs = rs.apply(&u).dot(&v);
            let rhs = u.dot(&rs.adjoint(&v));
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn max_matches_brute_force(shape in shape_strategy(6), mask in 1u32..64, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rank = shape.len();
            let axes: Vec<usize> = (0..rank).filter(|a| mask & (1 << a) != 0).collect();
            prop_assume!(!axes.is_empty());
            // Small integer values force ties.
            let t = DenseTensor::from_vec(&shape, (0..shape.iter().product::<usize>())
                .map(|_| rng.random_range(0..4) as f64).collect()).unwrap();
            let (vals, args) = max_over_axes(&t, &axes).unwrap();
            for o in 0..vals.len() {
                let mut best = f64::NEG_INFINITY;
                let mut best_flat = usize::MAX;
                for flat in 0..t.len() {
                    let idx = t.unravel(flat);
                    let kept: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).map(|a| idx[a]).collect();
                    let ko = if kept.is_empty() { 0 } else { vals.flat_index(&kept) };
                    if ko == o && t.data()[flat] > best {
                        best = t.data()[flat];
                        best_flat = flat;
                    }
                }
                prop_assert_eq!(vals.data()[o], best);
                let idx = t.unravel(best_flat);
                let red: Vec<usize> = axes.iter().map(|&a| idx[a]).collect();
                prop_assert_eq!(args.tuple(o), red);
            }
        }
    }
}
