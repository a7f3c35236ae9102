//! Reverse-mode differentiation over the fixed op set of the matching
//! pipeline. Every op stores what its adjoint needs; nothing else.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::chm::ScaleArgs;
use crate::convnd::{conv_fast, conv_input_grad, conv_kernel_grad, OpCounter};
use crate::correlation::{correlate_backward, correlate_with_cosines, read_slot, write_slot, FeatureMap, Projection};
use crate::error::{ChmError, Result};
use crate::flow::{form_flow, form_flow_backward, kernel_softmax, kernel_softmax_backward, SoftArgmaxConfig, SoftmaxOutput};
use crate::kernel::SharedKernel;
use crate::tensor::{max_over_axes, DenseTensor, Elementwise, PairResize};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    Project { input: usize, weights: usize, bias: usize },
    Resize { input: usize, op: PairResize },
    Correlate { src: usize, trg: usize, cos: DenseTensor },
    Assemble6d { slots: Vec<usize>, scales: usize },
    ExpandKernel { params: usize, kernel: Box<SharedKernel> },
    Conv { input: usize, kernel: usize },
    AddScalar { input: usize, scalar: usize },
    Sigmoid { input: usize },
    Relu { input: usize },
    ScaleMaxPool { input: usize, args: Vec<usize> },
    KernelSoftmax { input: usize, out: SoftmaxOutput, cfg: SoftArgmaxConfig },
    FormFlow { probs: usize, grid: DenseTensor },
    Transfer { flow: usize, samplers: Vec<DenseTensor> },
    KeypointLoss { pred: usize, targets: Vec<(f64, f64)> },
}

struct Node {
    value: DenseTensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    /// `None` if `v` did not influence the output or does not require grad.
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(ChmError::UnrecordedNode(v.index));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: DenseTensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// Trainable input.
    pub fn param(&mut self, value: DenseTensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn value(&self, v: Var) -> Result<&DenseTensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// 3x3 projection of `[C_in, H, W]` with weights `[C_out, C_in, 3, 3]`
    /// and bias `[C_out]`.
    pub fn project(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.idx(input)?, self.idx(weights)?, self.idx(bias)?);
        let proj = Projection { weights: self.nodes[w].value.clone(), bias: self.nodes[b].value.data().to_vec() };
        if proj.bias.len() != proj.c_out() {
            return Err(ChmError::ShapeMismatch { expected: vec![proj.c_out()], got: vec![proj.bias.len()] });
        }
        let out = proj.apply(&self.nodes[i].value)?;
        Ok(self.push(out, Op::Project { input: i, weights: w, bias: b }, &[i, w, b]))
    }

    pub fn resize(&mut self, input: Var, op: PairResize) -> Result<Var> {
        let i = self.idx(input)?;
        let out = op.apply(&self.nodes[i].value);
        Ok(self.push(out, Op::Resize { input: i, op }, &[i]))
    }

    /// Clamped cosine correlation of two `[C, H, W]` maps.
    pub fn correlate(&mut self, src: Var, trg: Var) -> Result<Var> {
        let (s, t) = (self.idx(src)?, self.idx(trg)?);
        let (out, cos) = correlate_with_cosines(&feature(&self.nodes[s].value), &feature(&self.nodes[t].value))?;
        Ok(self.push(out, Op::Correlate { src: s, trg: t, cos }, &[s, t]))
    }

    /// Stacks `S x S` slots of equal shape `[H, W, H, W]` (row-major over
    /// source scale, target scale) into `[H, W, S, H, W, S]`.
    pub fn assemble_6d(&mut self, slots: &[Var], scales: usize) -> Result<Var> {
        if scales == 0 || slots.len() != scales * scales {
            return Err(ChmError::Config(format!("{} slots for {scales} scales", slots.len())));
        }
        let idx: Vec<usize> = slots.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let first = self.nodes[idx[0]].value.shape().to_vec();
        if first.len() != 4 {
            return Err(ChmError::RankMismatch { input: first.len(), kernel: 4 });
        }
        let (h, w) = (first[0], first[1]);
        let mut vol = DenseTensor::zeros(&[h, w, scales, h, w, scales])?;
        for (n, &i) in idx.iter().enumerate() {
            let v = &self.nodes[i].value;
            if v.shape() != [h, w, h, w] {
                return Err(ChmError::ShapeMismatch { expected: vec![h, w, h, w], got: v.shape().to_vec() });
            }
            write_slot(&mut vol, v, n / scales, n % scales);
        }
        Ok(self.push(vol, Op::Assemble6d { slots: idx.clone(), scales }, &idx))
    }

    /// Dense, share-normalized kernel from a class-parameter vector.
    pub fn expand_kernel(&mut self, params: Var, sharing: &SharedKernel) -> Result<Var> {
        let p = self.idx(params)?;
        let mut k = sharing.clone();
        if self.nodes[p].value.len() != k.n_classes() {
            return Err(ChmError::ShapeMismatch { expected: vec![k.n_classes()], got: self.nodes[p].value.shape().to_vec() });
        }
        k.params = self.nodes[p].value.data().to_vec();
        let dense = k.expand_dense();
        Ok(self.push(dense, Op::ExpandKernel { params: p, kernel: Box::new(k) }, &[p]))
    }

    pub fn conv(&mut self, input: Var, kernel: Var, counter: &mut OpCounter) -> Result<Var> {
        let (i, k) = (self.idx(input)?, self.idx(kernel)?);
        let out = conv_fast(&self.nodes[i].value, &self.nodes[k].value, counter)?;
        Ok(self.push(out, Op::Conv { input: i, kernel: k }, &[i, k]))
    }

    /// Adds a one-element tensor to every entry.
    pub fn add_scalar(&mut self, input: Var, scalar: Var) -> Result<Var> {
        let (i, s) = (self.idx(input)?, self.idx(scalar)?);
        if self.nodes[s].value.len() != 1 {
            return Err(ChmError::ShapeMismatch { expected: vec![1], got: self.nodes[s].value.shape().to_vec() });
        }
        let out = self.nodes[i].value.map(Elementwise::AddConst(self.nodes[s].value.data()[0]));
        Ok(self.push(out, Op::AddScalar { input: i, scalar: s }, &[i, s]))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let out = self.nodes[i].value.map(Elementwise::Sigmoid);
        Ok(self.push(out, Op::Sigmoid { input: i }, &[i]))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let out = self.nodes[i].value.map(Elementwise::Relu);
        Ok(self.push(out, Op::Relu { input: i }, &[i]))
    }

    /// Max over both scale axes of a 6D volume; the subgradient goes to the
    /// tie-broken winner.
    pub fn scale_maxpool(&mut self, input: Var) -> Result<(Var, ScaleArgs)> {
        let i = self.idx(input)?;
        let v = &self.nodes[i].value;
        if v.rank() != 6 {
            return Err(ChmError::RankMismatch { input: v.rank(), kernel: 6 });
        }
        let sh = v.shape().to_vec();
        let (values, args) = max_over_axes(v, &[2, 5])?;
        let (h, w, s) = (sh[0], sh[1], sh[2]);
        let hw = h * w;
        let sources = args
            .flat
            .iter()
            .enumerate()
            .map(|(n, &f)| {
                let (a, b) = (n / hw, n % hw);
                (a * s + f / s) * hw * s + b * s + f % s
            })
            .collect();
        let scale_args = ScaleArgs { scales: s, flat: args.flat };
        Ok((self.push(values, Op::ScaleMaxPool { input: i, args: sources }, &[i]), scale_args))
    }

    pub fn kernel_softmax(&mut self, input: Var, cfg: &SoftArgmaxConfig) -> Result<Var> {
        let i = self.idx(input)?;
        let out = kernel_softmax(&self.nodes[i].value, cfg)?;
        let probs = out.probs.clone();
        Ok(self.push(probs, Op::KernelSoftmax { input: i, out, cfg: *cfg }, &[i]))
    }

    pub fn form_flow(&mut self, probs: Var, grid: &DenseTensor) -> Result<Var> {
        let p = self.idx(probs)?;
        let out = form_flow(&self.nodes[p].value, grid)?;
        Ok(self.push(out, Op::FormFlow { probs: p, grid: grid.clone() }, &[p]))
    }

    /// `[M, 2]` keypoints transferred with fixed soft samplers.
    pub fn transfer(&mut self, flow: Var, samplers: Vec<DenseTensor>) -> Result<Var> {
        let f = self.idx(flow)?;
        let fv = &self.nodes[f].value;
        let cells = fv.len() / 2;
        let mut out = Vec::with_capacity(samplers.len() * 2);
        for w in &samplers {
            if w.len() != cells {
                return Err(ChmError::ShapeMismatch { expected: fv.shape()[..2].to_vec(), got: w.shape().to_vec() });
            }
            let k = crate::flow::transfer_keypoint(fv, w);
            out.extend([k.0, k.1]);
        }
        let m = samplers.len();
        if m == 0 {
            return Err(ChmError::Empty("keypoints"));
        }
        let value = DenseTensor::from_vec(&[m, 2], out)?;
        Ok(self.push(value, Op::Transfer { flow: f, samplers }, &[f]))
    }

    /// Mean Euclidean distance between `[M, 2]` predictions and targets.
    pub fn keypoint_loss(&mut self, pred: Var, targets: &[(f64, f64)]) -> Result<Var> {
        let p = self.idx(pred)?;
        let pv = &self.nodes[p].value;
        if targets.is_empty() {
            return Err(ChmError::Empty("keypoints"));
        }
        if pv.shape() != [targets.len(), 2] {
            return Err(ChmError::ShapeMismatch { expected: vec![targets.len(), 2], got: pv.shape().to_vec() });
        }
        let l = keypoint_loss(pv.data(), targets);
        let value = DenseTensor::from_vec(&[1], vec![l])?;
        Ok(self.push(value, Op::KeypointLoss { pred: p, targets: targets.to_vec() }, &[p]))
    }

    /// Gradients of a one-element output.
    pub fn backward(&self, output: Var, counter: &mut OpCounter) -> Result<Gradients> {
        let o = self.idx(output)?;
        if self.nodes[o].value.len() != 1 {
            return Err(ChmError::ShapeMismatch { expected: vec![1], got: self.nodes[o].value.shape().to_vec() });
        }
        self.backward_with(output, DenseTensor::new(&[1], 1.0)?, counter)
    }

    /// Vector-Jacobian product with an explicit seed.
    pub fn backward_with(&self, output: Var, seed: DenseTensor, counter: &mut OpCounter) -> Result<Gradients> {
        let o = self.idx(output)?;
        if seed.shape() != self.nodes[o].value.shape() {
            return Err(ChmError::ShapeMismatch { expected: self.nodes[o].value.shape().to_vec(), got: seed.shape().to_vec() });
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; self.nodes.len()];
        grads[o] = Some(seed);
        for n in (0..=o).rev() {
            let Some(g) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            if !node.requires_grad {
                continue;
            }
            for (input, gi) in self.vjp(node, &g, counter)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.axpy(1.0, &gi),
                    slot => *slot = Some(gi),
                }
            }
            grads[n] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn vjp(&self, node: &Node, g: &DenseTensor, counter: &mut OpCounter) -> Result<Vec<(usize, DenseTensor)>> {
        let val = |i: usize| &self.nodes[i].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Project { input, weights, bias } => {
                let proj = Projection { weights: val(*weights).clone(), bias: val(*bias).data().to_vec() };
                if self.needs(*weights) || self.needs(*bias) {
                    let pg = proj.param_grads(val(*input), g)?;
                    out.push((*weights, pg.weights));
                    out.push((*bias, DenseTensor::from_vec(&[pg.bias.len()], pg.bias)?));
                }
                if self.needs(*input) {
                    out.push((*input, proj.input_grad(g)?));
                }
            }
            Op::Resize { input, op } => out.push((*input, op.adjoint(g))),
            Op::Correlate { src, trg, cos } => {
                let (gs, gt) = correlate_backward(&feature(val(*src)), &feature(val(*trg)), cos, g);
                out.push((*src, gs));
                out.push((*trg, gt));
            }
            Op::Assemble6d { slots, scales } => {
                for (n, &i) in slots.iter().enumerate() {
                    if self.needs(i) {
                        out.push((i, read_slot(g, n / scales, n % scales)));
                    }
                }
            }
            Op::ExpandKernel { params, kernel } => {
                let pg = kernel.accumulate_param_grad(g)?;
                out.push((*params, DenseTensor::from_vec(&[pg.len()], pg)?));
            }
            Op::Conv { input, kernel } => {
                if self.needs(*input) {
                    out.push((*input, conv_input_grad(g, val(*kernel), counter)?));
                }
                if self.needs(*kernel) {
                    out.push((*kernel, conv_kernel_grad(val(*input), g, val(*kernel).shape(), counter)?));
                }
            }
            Op::AddScalar { input, scalar } => {
                out.push((*input, g.clone()));
                out.push((*scalar, DenseTensor::from_vec(&[1], vec![g.sum()])?));
            }
            Op::Sigmoid { .. } => {
                let data = node.value.data().iter().zip(g.data()).map(|(s, gv)| gv * s * (1.0 - s)).collect();
                let input = self.sole_input(node);
                out.push((input, DenseTensor::from_vec(g.shape(), data)?));
            }
            Op::Relu { input } => {
                let data = val(*input).data().iter().zip(g.data()).map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 }).collect();
                out.push((*input, DenseTensor::from_vec(g.shape(), data)?));
            }
            Op::ScaleMaxPool { input, args } => {
                let mut gi = val(*input).zeros_like();
                for (n, &src) in args.iter().enumerate() {
                    gi.data_mut()[src] += g.data()[n];
                }
                out.push((*input, gi));
            }
            Op::KernelSoftmax { input, out: sm, cfg } => out.push((*input, kernel_softmax_backward(sm, g, cfg))),
            Op::FormFlow { probs, grid } => out.push((*probs, form_flow_backward(g, grid, val(*probs).shape()))),
            Op::Transfer { flow, samplers } => {
                let mut gf = val(*flow).zeros_like();
                for (m, w) in samplers.iter().enumerate() {
                    let (gx, gy) = (g.data()[2 * m], g.data()[2 * m + 1]);
                    for (c, &wt) in w.data().iter().enumerate() {
                        gf.data_mut()[2 * c] += wt * gx;
                        gf.data_mut()[2 * c + 1] += wt * gy;
                    }
                }
                out.push((*flow, gf));
            }
            Op::KeypointLoss { pred, targets } => {
                let p = val(*pred).data();
                let scale = g.data()[0] / targets.len() as f64;
                let mut gp = vec![0.0; p.len()];
                for (m, t) in targets.iter().enumerate() {
                    let (dx, dy) = (p[2 * m] - t.0, p[2 * m + 1] - t.1);
                    let d = (dx * dx + dy * dy).sqrt();
                    // Zero is a valid subgradient of the norm at the origin.
                    if d > 0.0 {
                        gp[2 * m] = scale * dx / d;
                        gp[2 * m + 1] = scale * dy / d;
                    }
                }
                out.push((*pred, DenseTensor::from_vec(val(*pred).shape(), gp)?));
            }
        }
        Ok(out)
    }

    fn sole_input(&self, node: &Node) -> usize {
        match node.op {
            Op::Sigmoid { input } | Op::Relu { input } => input,
            _ => unreachable!("single-input op"),
        }
    }
}

fn feature(values: &DenseTensor) -> FeatureMap {
    FeatureMap { values: values.clone(), scale_id: 0 }
}

/// `(1/M) sum_m ||p_m - t_m||` over interleaved `(x, y)` predictions.
pub fn keypoint_loss(pred: &[f64], targets: &[(f64, f64)]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(m, t)| ((pred[2 * m] - t.0).powi(2) + (pred[2 * m + 1] - t.1).powi(2)).sqrt())
        .sum();
    total / targets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::regular_grid;
    use crate::kernel::{build_sharing, KernelGeometry, SharingScheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> DenseTensor {
        let n = shape.iter().product();
        DenseTensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(keypoint_loss(&[0.1, 0.2], &[(0.1, 0.2)]), 0.0);
        assert!((keypoint_loss(&[0.3, 0.4], &[(0.0, 0.0)]) - 0.5).abs() < 1e-15);
        assert!((keypoint_loss(&[0.0, 0.0, 1.0, 0.0], &[(0.0, 0.0), (0.0, 0.0)]) - 0.5).abs() < 1e-15);
        let mut t = Tape::new();
        let p = t.constant(DenseTensor::zeros(&[1, 2]).unwrap());
        assert!(matches!(t.keypoint_loss(p, &[]), Err(ChmError::Empty(_))));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Tape::new();
        let b = Tape::new();
        let v = a.param(DenseTensor::new(&[1], 1.0).unwrap());
        assert!(matches!(b.backward(v, &mut OpCounter::default()), Err(ChmError::UnrecordedNode(_))));
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut t = Tape::new();
        let x = t.param(DenseTensor::new(&[2, 2], 0.3).unwrap());
        let y = t.sigmoid(x).unwrap();
        let g = t.backward_with(y, DenseTensor::zeros(&[2, 2]).unwrap(), &mut OpCounter::default()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_gradient_only_at_winners() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let x = t.param(random(&[2, 2, 3, 2, 2, 3], &mut rng, 0.0, 1.0));
        let (y, args) = t.scale_maxpool(x).unwrap();
        let g = t.backward_with(y, DenseTensor::new(&[2, 2, 2, 2], 1.0).unwrap(), &mut OpCounter::default()).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx.data().iter().filter(|&&v| v != 0.0).count(), 16);
        for n in 0..16 {
            let (m, s) = args.pair(n);
            let (a, b) = (n / 4, n % 4);
            assert_eq!(gx.get(&[a / 2, a % 2, m, b / 2, b % 2, s]), 1.0);
        }
    }

    /// Scalar function of a 4D correlation through every op after the
    /// assembly, differentiated with respect to kernel params and the input.
    #[test]
    fn head_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sharing = build_sharing(KernelGeometry::new_4d(3).unwrap(), SharingScheme::Psi).unwrap();
        let params0 = random(&[sharing.n_classes()], &mut rng, -0.5, 0.5);
        let c0 = random(&[4, 4, 4, 4], &mut rng, 0.0, 1.0);
        let cfg = SoftArgmaxConfig { gaussian_sigma: 2.0, temperature: 0.3, tau: 0.5 };
        let grid = regular_grid(4, 4);
        let samplers: Vec<DenseTensor> =
            [(0.1, -0.2), (-0.7, 0.5)].iter().map(|&k| crate::flow::soft_sampler(k, &grid, 0.5)).collect();
        let eval = |params: &DenseTensor, c: &DenseTensor| -> (f64, Option<(DenseTensor, DenseTensor)>) {
            let mut t = Tape::new();
            let p = t.param(params.clone());
            let x = t.param(c.clone());
            let k = t.expand_kernel(p, &sharing).unwrap();
            let y = t.conv(x, k, &mut OpCounter::default()).unwrap();
            let y = t.sigmoid(y).unwrap();
            let sm = t.kernel_softmax(y, &cfg).unwrap();
            let f = t.form_flow(sm, &grid).unwrap();
            let kp = t.transfer(f, samplers.clone()).unwrap();
            let l = t.keypoint_loss(kp, &[(0.3, 0.3), (-0.2, 0.9)]).unwrap();
            let g = t.backward(l, &mut OpCounter::default()).unwrap();
            (t.value(l).unwrap().data()[0], Some((g.get(p).unwrap().clone(), g.get(x).unwrap().clone())))
        };
        let (_, grads) = eval(&params0, &c0);
        let (gp, gx) = grads.unwrap();
        let h = 1e-6;
        for n in 0..params0.len() {
            let (mut a, mut b) = (params0.clone(), params0.clone());
            a.data_mut()[n] += h;
            b.data_mut()[n] -= h;
            let fd = (eval(&a, &c0).0 - eval(&b, &c0).0) / (2.0 * h);
            assert!((fd - gp.data()[n]).abs() < 1e-7, "param {n}: {fd} vs {}", gp.data()[n]);
        }
        for n in (0..c0.len()).step_by(17) {
            let (mut a, mut b) = (c0.clone(), c0.clone());
            a.data_mut()[n] += h;
            b.data_mut()[n] -= h;
            let fd = (eval(&params0, &a).0 - eval(&params0, &b).0) / (2.0 * h);
            assert!((fd - gx.data()[n]).abs() < 1e-7, "input {n}: {fd} vs {}", gx.data()[n]);
        }
    }

    #[test]
    fn feature_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats = random(&[6, 3, 3], &mut rng, -1.0, 1.0);
        let w0 = random(&[2, 6, 3, 3], &mut rng, -0.5, 0.5);
        let b0 = random(&[2], &mut rng, -0.1, 0.1);
        let resize = PairResize::new(&[3, 3, 3, 3], &[(0, 1), (2, 3)], &[(4, 4), (4, 4)]).unwrap();
        let weights = random(&[4, 4, 4, 4], &mut rng, -1.0, 1.0);
        let eval = |w: &DenseTensor, b: &DenseTensor| -> (f64, DenseTensor, DenseTensor) {
            let mut t = Tape::new();
            let x = t.constant(feats.clone());
            let wv = t.param(w.clone());
            let bv = t.param(b.clone());
            let p = t.project(x, wv, bv).unwrap();
            assert!(t.correlate(p, x).is_err(), "channel mismatch");
            let p2 = t.project(x, wv, bv).unwrap();
            let corr = t.correlate(p, p2).unwrap();
            let r = t.resize(corr, resize.clone()).unwrap();
            let r = t.relu(r).unwrap();
            let s = t.assemble_6d(&[r], 1).unwrap();
            let val = t.value(s).unwrap().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
            let seed = DenseTensor::from_vec(&[4, 4, 1, 4, 4, 1], weights.data().to_vec()).unwrap();
            let g = t.backward_with(s, seed, &mut OpCounter::default()).unwrap();
            (val, g.get(wv).unwrap().clone(), g.get(bv).unwrap().clone())
        };
        let (_, gw, gb) = eval(&w0, &b0);
        let h = 1e-6;
        for n in (0..w0.len()).step_by(5) {
            let (mut a, mut b) = (w0.clone(), w0.clone());
            a.data_mut()[n] += h;
            b.data_mut()[n] -= h;
            let fd = (eval(&a, &b0).0 - eval(&b, &b0).0) / (2.0 * h);
            assert!((fd - gw.data()[n]).abs() < 1e-6, "weight {n}: {fd} vs {}", gw.data()[n]);
        }
        for n in 0..2 {
            let (mut a, mut b) = (b0.clone(), b0.clone());
            a.data_mut()[n] += h;
            b.data_mut()[n] -= h;
            let fd = (eval(&w0, &a).0 - eval(&w0, &b).0) / (2.0 * h);
            assert!((fd - gb.data()[n]).abs() < 1e-6, "bias {n}: {fd} vs {}", gb.data()[n]);
        }
    }
}
