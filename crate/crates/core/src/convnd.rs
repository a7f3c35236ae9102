//! Single-channel N-dimensional convolution (cross-correlation orientation,
//! stride 1, zero "same" padding).
//!
//! Three routes compute the same result:
//!
//! * [`conv_naive`] sums the kernel window for every output position. It is
//!   the reference the other two are checked against.
//! * [`conv_sliced`] convolves each leading-axis slice separately with each
//!   leading kernel slice (`k * H` lower-rank convolutions).
//! * [`conv_fast`] folds the leading axis into the batch, runs one
//!   lower-rank convolution per leading kernel slice over the whole batch
//!   (`k` calls), and recombines shifted partial results. Folding recurses
//!   until rank 3, where a direct loop does the work.

use crate::error::{ChmError, Result};
use crate::tensor::{strides_of, DenseTensor};

/// Operation counts accumulated while convolving.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub n_3d_conv_calls: u64,
    pub n_mul_adds: u64,
}

impl OpCounter {
    pub fn merge(&mut self, other: &OpCounter) {
        self.n_3d_conv_calls += other.n_3d_conv_calls;
        self.n_mul_adds += other.n_mul_adds;
    }
}

fn check_ranks(input: &DenseTensor, kernel: &DenseTensor) -> Result<()> {
    if input.rank() != kernel.rank() {
        return Err(ChmError::RankMismatch { input: input.rank(), kernel: kernel.rank() });
    }
    Ok(())
}

/// Analytic mul-add count of a stride-1 same convolution, padding included.
pub fn flops_estimate(input_shape: &[usize], kernel_shape: &[usize]) -> u64 {
    input_shape.iter().chain(kernel_shape).map(|&e| e as u64).product()
}

/// Literal definition: `out(x) = sum_t in(x + t - c) * k(t)` with
/// out-of-range reads contributing zero.
pub fn conv_naive(
    input: &DenseTensor,
    kernel: &DenseTensor,
    counter: &mut OpCounter,
) -> Result<DenseTensor> {
    check_ranks(input, kernel)?;
    let rank = input.rank();
    let shape = input.shape();
    let kshape = kernel.shape();
    let mut out = input.zeros_like();
    let mut x = vec![0usize; rank];
    let mut t = vec![0usize; rank];
    for o in 0..input.len() {
        let mut rem = o;
        for k in (0..rank).rev() {
            x[k] = rem % shape[k];
            rem /= shape[k];
        }
        let mut acc = 0.0;
        for kf in 0..kernel.len() {
            let mut rem = kf;
            for k in (0..rank).rev() {
                t[k] = rem % kshape[k];
                rem /= kshape[k];
            }
            let mut flat = 0usize;
            let mut inside = true;
            for k in 0..rank {
                let p = x[k] as i64 + t[k] as i64 - (kshape[k] / 2) as i64;
                if p < 0 || p >= shape[k] as i64 {
                    inside = false;
                    break;
                }
                flat = flat * shape[k] + p as usize;
            }
            if inside {
                acc += input.data()[flat] * kernel.data()[kf];
                counter.n_mul_adds += 1;
            }
        }
        out.data_mut()[o] = acc;
    }
    Ok(out)
}

/// Calls `f(out_start, len)` for every maximal contiguous run of output
/// positions whose input position `x + offset` is in range. The input flat
/// index of a run is `out_start + shift` with `shift = offset . strides`.
fn for_each_run(shape: &[usize], offset: &[i64], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut lo = vec![0usize; rank];
    let mut hi = vec![0usize; rank];
    for k in 0..rank {
        let e = shape[k] as i64;
        let l = (-offset[k]).max(0);
        let h = (e - offset[k]).min(e);
        if l >= h {
            return;
        }
        lo[k] = l as usize;
        hi[k] = h as usize;
    }
    let strides = strides_of(shape);
    // Trailing axes with full valid range merge into one contiguous run.
    let mut j = rank - 1;
    while j > 0 && lo[j] == 0 && hi[j] == shape[j] {
        j -= 1;
    }
    let run_len = (hi[j] - lo[j]) * strides[j];
    let mut idx: Vec<usize> = lo[..j].to_vec();
    loop {
        let base: usize =
            idx.iter().zip(&strides[..j]).map(|(i, s)| i * s).sum::<usize>() + lo[j] * strides[j];
        f(base, run_len);
        let mut k = j;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < hi[k] {
                break;
            }
            idx[k] = lo[k];
        }
    }
}

fn tap_offsets(kshape: &[usize], flat: usize) -> Vec<i64> {
    let mut rem = flat;
    let mut t = vec![0i64; kshape.len()];
    for k in (0..kshape.len()).rev() {
        t[k] = (rem % kshape[k]) as i64 - (kshape[k] / 2) as i64;
        rem /= kshape[k];
    }
    t
}

/// Direct tap-loop convolution accumulated into `out`. Shapes may include
/// leading batch axes with kernel extent 1. Zero taps are skipped.
fn direct_accumulate(
    input: &[f64],
    shape: &[usize],
    kernel: &[f64],
    kshape: &[usize],
    out: &mut [f64],
    counter: &mut OpCounter,
) {
    let strides = strides_of(shape);
    for (kf, &w) in kernel.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let off = tap_offsets(kshape, kf);
        let shift: i64 = off.iter().zip(&strides).map(|(o, &s)| o * s as i64).sum();
        for_each_run(shape, &off, |start, len| {
            let src_start = (start as i64 + shift) as usize;
            let src = &input[src_start..src_start + len];
            for (d, &s) in out[start..start + len].iter_mut().zip(src) {
                *d += w * s;
            }
            counter.n_mul_adds += len as u64;
        });
    }
}

/// Rank-3 core over a batch: `input` is `[batch, d0, d1, d2]` row-major.
fn conv3d_batched(
    input: &[f64],
    batch: usize,
    dims: &[usize],
    kernel: &[f64],
    kdims: &[usize],
    counter: &mut OpCounter,
) -> Vec<f64> {
    counter.n_3d_conv_calls += 1;
    let mut shape = Vec::with_capacity(dims.len() + 1);
    shape.push(batch);
    shape.extend_from_slice(dims);
    let mut kshape = Vec::with_capacity(kdims.len() + 1);
    kshape.push(1);
    kshape.extend_from_slice(kdims);
    let mut out = vec![0.0; input.len()];
    direct_accumulate(input, &shape, kernel, &kshape, &mut out, counter);
    out
}

/// Folded convolution of a batch of rank-`dims.len()` tensors.
fn conv_folded(
    input: &[f64],
    batch: usize,
    dims: &[usize],
    kernel: &[f64],
    kdims: &[usize],
    counter: &mut OpCounter,
) -> Vec<f64> {
    if dims.len() <= 3 {
        // Pad low ranks up to 3 with unit axes.
        let pad = 3 - dims.len();
        let d: Vec<usize> = std::iter::repeat_n(1, pad).chain(dims.iter().copied()).collect();
        let kd: Vec<usize> = std::iter::repeat_n(1, pad).chain(kdims.iter().copied()).collect();
        return conv3d_batched(input, batch, &d, kernel, &kd, counter);
    }
    let lead = dims[0];
    let k = kdims[0];
    let p = (k / 2) as i64;
    let slice_len: usize = dims[1..].iter().product();
    let kslice_len: usize = kdims[1..].iter().product();
    let mut out = vec![0.0; input.len()];
    for a in 0..k {
        let kslice = &kernel[a * kslice_len..(a + 1) * kslice_len];
        if kslice.iter().all(|&w| w == 0.0) {
            continue;
        }
        // Leading axis folded into the batch: one call covers every slice.
        let partial = conv_folded(input, batch * lead, &dims[1..], kslice, &kdims[1..], counter);
        let shift = a as i64 - p;
        for b in 0..batch {
            for i in 0..lead as i64 {
                let src = i + shift;
                if src < 0 || src >= lead as i64 {
                    continue;
                }
                let dst_off = (b * lead + i as usize) * slice_len;
                let src_off = (b * lead + src as usize) * slice_len;
                for (d, &s) in out[dst_off..dst_off + slice_len]
                    .iter_mut()
                    .zip(&partial[src_off..src_off + slice_len])
                {
                    *d += s;
                }
            }
        }
    }
    out
}

/// Fast convolution by recursive leading-axis folding. Numerically equal
/// to [`conv_naive`] up to summation order.
pub fn conv_fast(
    input: &DenseTensor,
    kernel: &DenseTensor,
    counter: &mut OpCounter,
) -> Result<DenseTensor> {
    check_ranks(input, kernel)?;
    let data = conv_folded(input.data(), 1, input.shape(), kernel.data(), kernel.shape(), counter);
    DenseTensor::from_vec(input.shape(), data)
}

/// Per-slice formulation: every output slice `i` along the leading axis is
/// the sum over leading kernel slices `a` of a lower-rank convolution of
/// input slice `i - p + a`. Performs `k * H` lower-rank convolutions at the
/// top level.
pub fn conv_sliced(
    input: &DenseTensor,
    kernel: &DenseTensor,
    counter: &mut OpCounter,
) -> Result<DenseTensor> {
    check_ranks(input, kernel)?;
    let dims = input.shape();
    let kdims = kernel.shape();
    if dims.len() <= 3 {
        return conv_fast(input, kernel, counter);
    }
    let lead = dims[0];
    let k = kdims[0];
    let p = (k / 2) as i64;
    let slice_len: usize = dims[1..].iter().product();
    let kslice_len: usize = kdims[1..].iter().product();
    let mut out = vec![0.0; input.len()];
    for i in 0..lead {
        for a in 0..k {
            let src = i as i64 - p + a as i64;
            let kslice = &kernel.data()[a * kslice_len..(a + 1) * kslice_len];
            let in_slice: Vec<f64> = if src < 0 || src >= lead as i64 {
                // Padding slice; the call still happens in this formulation.
                vec![0.0; slice_len]
            } else {
                let s = src as usize;
                input.data()[s * slice_len..(s + 1) * slice_len].to_vec()
            };
            let partial = conv_folded(&in_slice, 1, &dims[1..], kslice, &kdims[1..], counter);
            for (d, s) in out[i * slice_len..(i + 1) * slice_len].iter_mut().zip(partial) {
                *d += s;
            }
        }
    }
    DenseTensor::from_vec(dims, out)
}

/// Kernel with every axis reversed.
pub fn flip_kernel(kernel: &DenseTensor) -> DenseTensor {
    let mut data = kernel.data().to_vec();
    data.reverse();
    DenseTensor::from_vec(kernel.shape(), data).expect("same shape")
}

/// Gradient of a same convolution with respect to its input.
pub fn conv_input_grad(
    grad_out: &DenseTensor,
    kernel: &DenseTensor,
    counter: &mut OpCounter,
) -> Result<DenseTensor> {
    conv_fast(grad_out, &flip_kernel(kernel), counter)
}

/// Gradient of a same convolution with respect to its (dense) kernel:
/// `gk(t) = sum_x in(x + t - c) * g(x)`.
pub fn conv_kernel_grad(
    input: &DenseTensor,
    grad_out: &DenseTensor,
    kernel_shape: &[usize],
    counter: &mut OpCounter,
) -> Result<DenseTensor> {
    if input.shape() != grad_out.shape() {
        return Err(ChmError::ShapeMismatch {
            expected: input.shape().to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    if kernel_shape.len() != input.rank() {
        return Err(ChmError::RankMismatch { input: input.rank(), kernel: kernel_shape.len() });
    }
    let shape = input.shape();
    let strides = strides_of(shape);
    let n: usize = kernel_shape.iter().product();
    let mut gk = vec![0.0; n];
    let (x, g) = (input.data(), grad_out.data());
    for (kf, slot) in gk.iter_mut().enumerate() {
        let off = tap_offsets(kernel_shape, kf);
        let shift: i64 = off.iter().zip(&strides).map(|(o, &s)| o * s as i64).sum();
        let mut acc = 0.0;
        for_each_run(shape, &off, |start, len| {
            let src_start = (start as i64 + shift) as usize;
            acc += g[start..start + len]
                .iter()
                .zip(&x[src_start..src_start + len])
                .map(|(a, b)| a * b)
                .sum::<f64>();
            counter.n_mul_adds += len as u64;
        });
        *slot = acc;
    }
    DenseTensor::from_vec(kernel_shape, gk)
}
