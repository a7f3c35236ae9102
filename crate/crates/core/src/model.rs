//! The end-to-end matcher: features, pyramid, 6D correlation, CHM head,
//! flow, and keypoint transfer, with its trainable parameters.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chm::{rhm_rescore, rhm_vote_correlation, upsample_op, ChmLayer, MatchHeadConfig, ScaleArgs, VoteKernel};
use crate::convnd::OpCounter;
use crate::correlation::{extract_features, level_resize, pair_resize, Extractor, FeatureMap, PyramidConfig, PyramidParams};
use crate::error::{ChmError, Result};
use crate::flow::{denormalize, normalize, regular_grid, soft_sampler, transfer_keypoint, SoftArgmaxConfig};
use crate::image::GrayImage;
use crate::kernel::InitMode;
use crate::learn::synth::KeypointPair;
use crate::learn::tape::{Tape, Var};
use crate::tensor::{DenseTensor, Elementwise};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature grid `H = W`.
    pub grid: usize,
    pub extractor: Extractor,
    pub pyramid: PyramidConfig,
    pub head: MatchHeadConfig,
    pub softargmax: SoftArgmaxConfig,
}

impl ModelConfig {
    /// 15x15 features, 30x30 output grid.
    pub fn standard() -> Self {
        Self::with_grid(15)
    }

    /// 8x8 features, 16x16 output grid.
    pub fn desk() -> Self {
        Self::with_grid(8)
    }

    pub fn with_grid(grid: usize) -> Self {
        let head = MatchHeadConfig::default();
        Self {
            grid,
            extractor: Extractor::default(),
            pyramid: PyramidConfig::default(),
            softargmax: SoftArgmaxConfig::for_grid(grid * head.upsample),
            head,
        }
    }

    pub fn out_grid(&self) -> usize {
        self.grid * self.head.upsample
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(ChmError::Config(format!("grid {} < 2", self.grid)));
        }
        if self.pyramid.scales == 0 || self.pyramid.rho == 0 || !self.extractor.channels().is_multiple_of(self.pyramid.rho) {
            return Err(ChmError::Config(format!(
                "{} channels, {} scales, rho {}: need scales >= 1 and rho dividing the channel count",
                self.extractor.channels(),
                self.pyramid.scales,
                self.pyramid.rho
            )));
        }
        if self.head.upsample == 0 {
            return Err(ChmError::Config("upsample must be positive".into()));
        }
        self.head.kernel_6d.validate()?;
        self.head.kernel_4d.validate()?;
        if self.head.kernel_6d.rank != 6 || self.head.kernel_4d.rank != 4 {
            return Err(ChmError::Config("head kernels must be rank 6 then rank 4".into()));
        }
        self.softargmax.validate()
    }
}

/// Features of one image pair plus the image sizes.
#[derive(Clone, Debug)]
pub struct PairFeatures {
    pub source: FeatureMap,
    pub target: FeatureMap,
    pub source_size: (usize, usize),
    pub target_size: (usize, usize),
}

/// Inference result.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Final `[H', W', H', W']` correlation.
    pub corr: DenseTensor,
    /// `[H', W', 2]` transferred grid coordinates.
    pub flow: DenseTensor,
    /// `[H, W, S, H, W, S]` volume that was max-pooled over scale.
    pub voted: DenseTensor,
    pub scale_args: ScaleArgs,
    pub counter: OpCounter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub projections: PyramidParams,
    pub chm6: ChmLayer,
    pub chm4: ChmLayer,
}

struct ParamVars {
    proj: Vec<(Var, Var)>,
    k6: Var,
    b6: Var,
    k4: Var,
    b4: Var,
}

struct Recorded {
    params: ParamVars,
    flow: Var,
    corr: Var,
    voted: Var,
    scale_args: ScaleArgs,
}

impl Model {
    /// Random shared projections from `seed`, CHM kernels from `init`.
    pub fn new(config: ModelConfig, init: InitMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let projections = PyramidParams::random(&config.pyramid, config.extractor.channels(), seed)?;
        let (mut chm6, mut chm4) = config.head.layers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        chm6.kernel.init(init, &mut rng);
        chm4.kernel.init(init, &mut rng);
        Ok(Self { config, projections, chm6, chm4 })
    }

    pub fn features(&self, source: &GrayImage, target: &GrayImage) -> Result<PairFeatures> {
        let g = self.config.grid;
        Ok(PairFeatures {
            source: extract_features(source, g, g, self.config.extractor)?,
            target: extract_features(target, g, g, self.config.extractor)?,
            source_size: (source.width, source.height),
            target_size: (target.width, target.height),
        })
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        for (s, p) in self.projections.levels.iter().enumerate() {
            out.push(ParamGroup { name: format!("proj{s}.weight"), len: p.weights.len() });
            out.push(ParamGroup { name: format!("proj{s}.bias"), len: p.bias.len() });
        }
        out.push(ParamGroup { name: "chm6d.kernel".into(), len: self.chm6.kernel.n_classes() });
        out.push(ParamGroup { name: "chm6d.bias".into(), len: 1 });
        out.push(ParamGroup { name: "chm4d.kernel".into(), len: self.chm4.kernel.n_classes() });
        out.push(ParamGroup { name: "chm4d.bias".into(), len: 1 });
        out
    }

    pub fn n_params(&self) -> usize {
        self.param_groups().iter().map(|g| g.len).sum()
    }

    /// All parameters in [`Model::param_groups`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for p in &self.projections.levels {
            out.extend_from_slice(p.weights.data());
            out.extend_from_slice(&p.bias);
        }
        out.extend_from_slice(&self.chm6.kernel.params);
        out.push(self.chm6.kernel.bias);
        out.extend_from_slice(&self.chm4.kernel.params);
        out.push(self.chm4.kernel.bias);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(ChmError::ShapeMismatch { expected: vec![self.n_params()], got: vec![flat.len()] });
        }
        let mut it = flat.iter().copied();
        for p in &mut self.projections.levels {
            p.weights.data_mut().iter_mut().for_each(|v| *v = it.next().unwrap());
            p.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        self.chm6.kernel.params.iter_mut().for_each(|v| *v = it.next().unwrap());
        self.chm6.kernel.bias = it.next().unwrap();
        self.chm4.kernel.params.iter_mut().for_each(|v| *v = it.next().unwrap());
        self.chm4.kernel.bias = it.next().unwrap();
        Ok(())
    }

    fn record(&self, tape: &mut Tape, feats: &PairFeatures, trainable: bool, counter: &mut OpCounter) -> Result<Recorded> {
        let leaf = |tape: &mut Tape, t: DenseTensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let cfg = &self.config;
        let proj: Vec<(Var, Var)> = self
            .projections
            .levels
            .iter()
            .map(|p| {
                let w = leaf(tape, p.weights.clone());
                let b = leaf(tape, DenseTensor::from_vec(&[p.bias.len()], p.bias.clone())?);
                Ok((w, b))
            })
            .collect::<Result<_>>()?;
        let scalar = |v: f64| DenseTensor::from_vec(&[1], vec![v]);
        let k6 = leaf(tape, DenseTensor::from_vec(&[self.chm6.kernel.n_classes()], self.chm6.kernel.params.clone())?);
        let b6 = leaf(tape, scalar(self.chm6.kernel.bias)?);
        let k4 = leaf(tape, DenseTensor::from_vec(&[self.chm4.kernel.n_classes()], self.chm4.kernel.params.clone())?);
        let b4 = leaf(tape, scalar(self.chm4.kernel.bias)?);

        let c1 = self.record_correlation(tape, feats, &proj)?;
        let k6d = tape.expand_kernel(k6, &self.chm6.kernel)?;
        let voted = tape.conv(c1, k6d, counter)?;
        let voted = tape.add_scalar(voted, b6)?;
        let (pooled, scale_args) = tape.scale_maxpool(voted)?;
        let squashed = tape.sigmoid(pooled)?;
        let up = tape.resize(squashed, upsample_op(tape.value(squashed)?.shape(), cfg.head.upsample)?)?;
        let k4d = tape.expand_kernel(k4, &self.chm4.kernel)?;
        let corr = tape.conv(up, k4d, counter)?;
        let corr = tape.add_scalar(corr, b4)?;
        let probs = tape.kernel_softmax(corr, &cfg.softargmax)?;
        let flow = tape.form_flow(probs, &regular_grid(cfg.out_grid(), cfg.out_grid()))?;
        Ok(Recorded { params: ParamVars { proj, k6, b6, k4, b4 }, flow, corr, voted, scale_args })
    }

    /// Projected pyramids of both images, all `S x S` correlations, resized
    /// to the grid and stacked into the 6D volume.
    fn record_correlation(&self, tape: &mut Tape, feats: &PairFeatures, proj: &[(Var, Var)]) -> Result<Var> {
        let cfg = &self.config;
        let g = cfg.grid;
        let factors = cfg.pyramid.factors();
        let levels = |f: &FeatureMap, tape: &mut Tape| -> Result<Vec<Var>> {
            let base = tape.constant(f.values.clone());
            factors
                .iter()
                .zip(proj)
                .map(|(&factor, &(w, b))| {
                    let resized = tape.resize(base, level_resize(f.values.shape(), factor)?)?;
                    tape.project(resized, w, b)
                })
                .collect()
        };
        let src = levels(&feats.source, tape)?;
        let trg = levels(&feats.target, tape)?;
        let mut slots = Vec::with_capacity(src.len() * trg.len());
        for &s in &src {
            for &t in &trg {
                let c = tape.correlate(s, t)?;
                let op = pair_resize(tape.value(c)?.shape(), g, g)?;
                slots.push(tape.resize(c, op)?);
            }
        }
        tape.assemble_6d(&slots, src.len())
    }

    pub fn forward(&self, feats: &PairFeatures) -> Result<Forward> {
        let mut tape = Tape::new();
        let mut counter = OpCounter::default();
        let rec = self.record(&mut tape, feats, false, &mut counter)?;
        Ok(Forward {
            corr: tape.value(rec.corr)?.clone(),
            flow: tape.value(rec.flow)?.clone(),
            voted: tape.value(rec.voted)?.clone(),
            scale_args: rec.scale_args,
            counter,
        })
    }

    /// Global-voting baseline: the max-pooled 6D correlation (no CHM) is
    /// rescored by a translation voting map normalized to peak 1, then
    /// squashed, upsampled and turned into flow like the CHM head output.
    pub fn forward_rhm(&self, feats: &PairFeatures, kernel: VoteKernel) -> Result<Forward> {
        let mut tape = Tape::new();
        let proj: Vec<(Var, Var)> = self
            .projections
            .levels
            .iter()
            .map(|p| {
                let w = tape.constant(p.weights.clone());
                let b = tape.constant(DenseTensor::from_vec(&[p.bias.len()], p.bias.clone())?);
                Ok((w, b))
            })
            .collect::<Result<_>>()?;
        let c1 = self.record_correlation(&mut tape, feats, &proj)?;
        let (pooled, scale_args) = tape.scale_maxpool(c1)?;
        let voted = tape.value(c1)?.clone();
        let pooled = tape.value(pooled)?.clone();
        let mut votes = rhm_vote_correlation(&pooled, kernel)?;
        let peak = votes.values.data().iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            votes.values = votes.values.map(Elementwise::Scale(1.0 / peak));
        }
        let rescored = rhm_rescore(&pooled, &votes)?.map(Elementwise::Sigmoid);
        let corr = upsample_op(rescored.shape(), self.config.head.upsample)?.apply(&rescored);
        let probs = crate::flow::kernel_softmax(&corr, &self.config.softargmax)?.probs;
        let n = self.config.out_grid();
        let flow = crate::flow::form_flow(&probs, &regular_grid(n, n))?;
        Ok(Forward { corr, flow, voted, scale_args, counter: OpCounter::default() })
    }

    /// Target-pixel predictions for source-pixel keypoints.
    pub fn transfer(&self, fwd: &Forward, feats: &PairFeatures, keypoints: &[(f64, f64)]) -> Vec<(f64, f64)> {
        let n = self.config.out_grid();
        let grid = regular_grid(n, n);
        let (sw, sh) = feats.source_size;
        let (tw, th) = feats.target_size;
        keypoints
            .iter()
            .map(|&k| {
                let w = soft_sampler(normalize(k, sw, sh), &grid, self.config.softargmax.tau);
                denormalize(transfer_keypoint(&fwd.flow, &w), tw, th)
            })
            .collect()
    }

    fn record_loss(&self, tape: &mut Tape, feats: &PairFeatures, keypoints: &[KeypointPair], counter: &mut OpCounter) -> Result<(Recorded, Var)> {
        if keypoints.is_empty() {
            return Err(ChmError::Empty("keypoints"));
        }
        let rec = self.record(tape, feats, true, counter)?;
        let n = self.config.out_grid();
        let grid = regular_grid(n, n);
        let (sw, sh) = feats.source_size;
        let (tw, th) = feats.target_size;
        let samplers = keypoints.iter().map(|(k, _)| soft_sampler(normalize(*k, sw, sh), &grid, self.config.softargmax.tau)).collect();
        let targets: Vec<(f64, f64)> = keypoints.iter().map(|(_, k)| normalize(*k, tw, th)).collect();
        let pred = tape.transfer(rec.flow, samplers)?;
        let loss = tape.keypoint_loss(pred, &targets)?;
        Ok((rec, loss))
    }

    /// Mean normalized keypoint distance.
    pub fn loss(&self, feats: &PairFeatures, keypoints: &[KeypointPair]) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = self.record_loss(&mut tape, feats, keypoints, &mut OpCounter::default())?;
        Ok(tape.value(loss)?.data()[0])
    }

    /// Loss and its gradient in [`Model::flat_params`] order.
    pub fn loss_and_grad(&self, feats: &PairFeatures, keypoints: &[KeypointPair], counter: &mut OpCounter) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (rec, loss) = self.record_loss(&mut tape, feats, keypoints, counter)?;
        let grads = tape.backward(loss, counter)?;
        let p = &rec.params;
        let mut order: Vec<Var> = p.proj.iter().flat_map(|&(w, b)| [w, b]).collect();
        order.extend([p.k6, p.b6, p.k4, p.b4]);
        let mut flat = Vec::with_capacity(self.n_params());
        for v in order {
            match grads.get(v) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, tape.value(v)?.len())),
            }
        }
        Ok((tape.value(loss)?.data()[0], flat))
    }

    /// Text checkpoint: one `group` header per parameter group followed by
    /// its values, shortest round-trip formatting.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("chm-checkpoint 1\n");
        let flat = self.flat_params();
        let mut offset = 0;
        for g in self.param_groups() {
            let meta = match g.name.as_str() {
                "chm6d.kernel" => kernel_meta(&self.chm6),
                "chm4d.kernel" => kernel_meta(&self.chm4),
                _ => String::new(),
            };
            let _ = writeln!(out, "group {} {}{}", g.name, g.len, meta);
            let vals: Vec<String> = flat[offset..offset + g.len].iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
            offset += g.len;
        }
        out
    }

    /// Loads parameters into a model built from `config`; group names,
    /// lengths and kernel schemes must agree.
    pub fn from_checkpoint(config: ModelConfig, text: &str) -> Result<Self> {
        let mut model = Model::new(config, InitMode::Delta, 0)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("chm-checkpoint 1") {
            return Err(ChmError::Parse("missing `chm-checkpoint 1` header".into()));
        }
        let mut flat = Vec::with_capacity(model.n_params());
        for g in model.param_groups() {
            let header = lines.next().ok_or_else(|| ChmError::Parse(format!("missing group {}", g.name)))?;
            let fields: Vec<&str> = header.split_whitespace().collect();
            if fields.len() < 3 || fields[0] != "group" || fields[1] != g.name || fields[2] != g.len.to_string() {
                return Err(ChmError::Parse(format!("expected `group {} {}`, found `{header}`", g.name, g.len)));
            }
            let expected_meta = match g.name.as_str() {
                "chm6d.kernel" => kernel_meta(&model.chm6),
                "chm4d.kernel" => kernel_meta(&model.chm4),
                _ => String::new(),
            };
            let meta = fields[3..].join(" ");
            if meta != expected_meta.trim() {
                return Err(ChmError::Parse(format!("group {}: checkpoint has `{meta}`, config has `{}`", g.name, expected_meta.trim())));
            }
            let values = lines.next().ok_or_else(|| ChmError::Parse(format!("missing values for {}", g.name)))?;
            let before = flat.len();
            for tok in values.split_whitespace() {
                flat.push(tok.parse::<f64>().map_err(|e| ChmError::Parse(format!("{}: `{tok}`: {e}", g.name)))?);
            }
            if flat.len() - before != g.len {
                return Err(ChmError::Parse(format!("{}: {} values, expected {}", g.name, flat.len() - before, g.len)));
            }
        }
        model.set_flat_params(&flat)?;
        Ok(model)
    }
}

fn kernel_meta(layer: &ChmLayer) -> String {
    let g = layer.kernel.geometry;
    format!(" scheme={} rank={} spatial={} scale={}", layer.kernel.scheme.name(), g.rank, g.spatial, g.scale)
}
