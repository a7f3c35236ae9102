//! Run configuration: a flat `key = value` file plus command-line overrides.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; an
//! unknown key or an unparsable value is an error.

use std::path::Path;
use std::str::FromStr;

use chm_core::correlation::{Extractor, PyramidConfig};
use chm_core::eval::TauMode;
use chm_core::flow::{SoftArgmaxConfig, DEFAULT_TEMPERATURE};
use chm_core::kernel::{InitMode, KernelGeometry, SharingScheme};
use chm_core::learn::{SynthConfig, TrainConfig};
use chm_core::model::ModelConfig;

use crate::error::CliError;

/// Documented keys, their defaults, and one-line meanings.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("grid", "15", "feature grid H = W"),
    ("upsample", "2", "output grid is upsample * grid"),
    ("scales", "3", "pyramid levels S (factors sqrt(2)^(s - (S-1)/2))"),
    ("rho", "4", "channel reduction of the per-level projections"),
    ("extractor", "patch", "patch | synthetic"),
    ("patch_side", "8", "patch extractor: side of the sampled patch"),
    ("synthetic_channels", "1024", "synthetic extractor: channels"),
    ("feature_seed", "3", "synthetic extractor: seed"),
    ("kernel6d_spatial", "5", "6D CHM kernel spatial extent"),
    ("kernel6d_scale", "3", "6D CHM kernel scale extent"),
    ("scheme6d", "psi", "full | iso | psi"),
    ("kernel4d_spatial", "5", "4D CHM kernel spatial extent"),
    ("scheme4d", "psi", "full | iso | psi"),
    ("sigma_g", "17 * out_grid / 30", "kernel soft-argmax Gaussian sigma, output cells"),
    ("temperature", "0.02", "kernel soft-argmax temperature"),
    ("tau", "0.1", "soft sampler radius, normalized units"),
    ("init", "near_identity", "delta | near_identity"),
    ("init_sigma", "0.01", "near_identity noise"),
    ("image_size", "240", "synthetic image side in pixels"),
    ("pairs", "10", "synth: number of pairs"),
    ("max_translation", "0.25", "synth: max translation per axis, fraction of image"),
    ("scale_min", "0.7071067811865476", "synth: smallest object scale"),
    ("scale_max", "1.4142135623730951", "synth: largest object scale"),
    ("n_keypoints", "8", "synth: keypoints per pair"),
    ("object_radius", "0.22", "synth: object radius, fraction of image"),
    ("clutter", "10", "synth: background shapes"),
    ("distractor_ratio", "0.2", "synth: share of textured distractors"),
    ("noise", "0.02", "synth: pixel noise std"),
    ("iterations", "100", "train: Adam iterations"),
    ("batch_size", "4", "train: pairs per iteration"),
    ("lr", "0.001", "train: learning rate"),
    ("seed", "0", "dataset, init and shuffling seed"),
    ("alphas", "0.05,0.1,0.15", "eval-pck: thresholds"),
    ("pck_modes", "img,bbox", "eval-pck: reference sizes"),
    ("probe_grid", "15", "eval-pr: source probe points per side"),
    ("rhm_sigma", "1", "eval-pr: Gaussian vote kernel of the baseline, bins"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub grid: usize,
    pub upsample: usize,
    pub scales: usize,
    pub rho: usize,
    pub extractor: String,
    pub patch_side: usize,
    pub synthetic_channels: usize,
    pub feature_seed: u64,
    pub kernel6d_spatial: usize,
    pub kernel6d_scale: usize,
    pub scheme6d: SharingScheme,
    pub kernel4d_spatial: usize,
    pub scheme4d: SharingScheme,
    pub sigma_g: Option<f64>,
    pub temperature: f64,
    pub tau: f64,
    pub init: String,
    pub init_sigma: f64,
    pub image_size: usize,
    pub pairs: usize,
    pub max_translation: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub n_keypoints: usize,
    pub object_radius: f64,
    pub clutter: usize,
    pub distractor_ratio: f64,
    pub noise: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub pck_modes: Vec<TauMode>,
    pub probe_grid: usize,
    pub rhm_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            grid: 15,
            upsample: 2,
            scales: 3,
            rho: 4,
            extractor: "patch".into(),
            patch_side: 8,
            synthetic_channels: 1024,
            feature_seed: 3,
            kernel6d_spatial: 5,
            kernel6d_scale: 3,
            scheme6d: SharingScheme::Psi,
            kernel4d_spatial: 5,
            scheme4d: SharingScheme::Psi,
            sigma_g: None,
            temperature: DEFAULT_TEMPERATURE,
            tau: 0.1,
            init: "near_identity".into(),
            init_sigma: 0.01,
            image_size: 240,
            pairs: 10,
            max_translation: synth.max_translation,
            scale_min: synth.scale_range.0,
            scale_max: synth.scale_range.1,
            n_keypoints: synth.n_keypoints,
            object_radius: synth.object_radius,
            clutter: synth.clutter,
            distractor_ratio: synth.distractor_ratio,
            noise: synth.noise,
            iterations: 100,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            alphas: vec![0.05, 0.1, 0.15],
            pck_modes: vec![TauMode::Img, TauMode::Bbox],
            probe_grid: 15,
            rhm_sigma: 1.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Usage(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    let items: Vec<T> = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("`{key}` needs at least one value")));
    }
    Ok(items)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| CliError::Usage(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (key, value) =
            kv.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{kv}` is not `key=value`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "grid" => self.grid = parse(key, value)?,
            "upsample" => self.upsample = parse(key, value)?,
            "scales" => self.scales = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "extractor" => match value {
                "patch" | "synthetic" => self.extractor = value.into(),
                _ => return Err(CliError::Usage(format!("extractor must be patch or synthetic, got `{value}`"))),
            },
            "patch_side" => self.patch_side = parse(key, value)?,
            "synthetic_channels" => self.synthetic_channels = parse(key, value)?,
            "feature_seed" => self.feature_seed = parse(key, value)?,
            "kernel6d_spatial" => self.kernel6d_spatial = parse(key, value)?,
            "kernel6d_scale" => self.kernel6d_scale = parse(key, value)?,
            "scheme6d" => self.scheme6d = parse(key, value)?,
            "kernel4d_spatial" => self.kernel4d_spatial = parse(key, value)?,
            "scheme4d" => self.scheme4d = parse(key, value)?,
            "sigma_g" => self.sigma_g = Some(parse(key, value)?),
            "temperature" => self.temperature = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "init" => match value {
                "delta" | "near_identity" => self.init = value.into(),
                _ => return Err(CliError::Usage(format!("init must be delta or near_identity, got `{value}`"))),
            },
            "init_sigma" => self.init_sigma = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "pairs" => self.pairs = parse(key, value)?,
            "max_translation" => self.max_translation = parse(key, value)?,
            "scale_min" => self.scale_min = parse(key, value)?,
            "scale_max" => self.scale_max = parse(key, value)?,
            "n_keypoints" => self.n_keypoints = parse(key, value)?,
            "object_radius" => self.object_radius = parse(key, value)?,
            "clutter" => self.clutter = parse(key, value)?,
            "distractor_ratio" => self.distractor_ratio = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "alphas" => self.alphas = parse_list(key, value)?,
            "pck_modes" => self.pck_modes = parse_list(key, value)?,
            "probe_grid" => self.probe_grid = parse(key, value)?,
            "rhm_sigma" => self.rhm_sigma = parse(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let kernel_6d = KernelGeometry::new_6d(self.kernel6d_spatial, self.kernel6d_scale)?;
        let kernel_4d = KernelGeometry::new_4d(self.kernel4d_spatial)?;
        let mut cfg = ModelConfig::with_grid(self.grid);
        cfg.extractor = match self.extractor.as_str() {
            "synthetic" => Extractor::Synthetic { seed: self.feature_seed, channels: self.synthetic_channels },
            _ => Extractor::Patch { side: self.patch_side },
        };
        cfg.pyramid = PyramidConfig { scales: self.scales, rho: self.rho };
        cfg.head.kernel_6d = kernel_6d;
        cfg.head.scheme_6d = self.scheme6d;
        cfg.head.kernel_4d = kernel_4d;
        cfg.head.scheme_4d = self.scheme4d;
        cfg.head.upsample = self.upsample;
        let mut sa = SoftArgmaxConfig::for_grid(cfg.out_grid());
        if let Some(s) = self.sigma_g {
            sa.gaussian_sigma = s;
        }
        sa.temperature = self.temperature;
        sa.tau = self.tau;
        cfg.softargmax = sa;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn init_mode(&self) -> InitMode {
        match self.init.as_str() {
            "delta" => InitMode::Delta,
            _ => InitMode::NearIdentity { sigma: self.init_sigma },
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig, CliError> {
        let cfg = SynthConfig {
            image_size: self.image_size,
            max_translation: self.max_translation,
            scale_range: (self.scale_min, self.scale_max),
            n_keypoints: self.n_keypoints,
            object_radius: self.object_radius,
            clutter: self.clutter,
            distractor_ratio: self.distractor_ratio,
            noise: self.noise,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        if self.batch_size == 0 || !(self.lr >= 0.0) {
            return Err(CliError::Usage("batch_size must be positive and lr non-negative".into()));
        }
        Ok(TrainConfig { iterations: self.iterations, batch_size: self.batch_size, lr: self.lr, seed: self.seed })
    }

    /// Every key with its current value, in `KEYS` order.
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut out = String::new();
        for (key, _, _) in KEYS {
            let value = match *key {
                "grid" => self.grid.to_string(),
                "upsample" => self.upsample.to_string(),
                "scales" => self.scales.to_string(),
                "rho" => self.rho.to_string(),
                "extractor" => self.extractor.clone(),
                "patch_side" => self.patch_side.to_string(),
                "synthetic_channels" => self.synthetic_channels.to_string(),
                "feature_seed" => self.feature_seed.to_string(),
                "kernel6d_spatial" => self.kernel6d_spatial.to_string(),
                "kernel6d_scale" => self.kernel6d_scale.to_string(),
                "scheme6d" => self.scheme6d.name().into(),
                "kernel4d_spatial" => self.kernel4d_spatial.to_string(),
                "scheme4d" => self.scheme4d.name().into(),
                "sigma_g" => match self.sigma_g {
                    Some(s) => s.to_string(),
                    None => continue,
                },
                "temperature" => self.temperature.to_string(),
                "tau" => self.tau.to_string(),
                "init" => self.init.clone(),
                "init_sigma" => self.init_sigma.to_string(),
                "image_size" => self.image_size.to_string(),
                "pairs" => self.pairs.to_string(),
                "max_translation" => self.max_translation.to_string(),
                "scale_min" => self.scale_min.to_string(),
                "scale_max" => self.scale_max.to_string(),
                "n_keypoints" => self.n_keypoints.to_string(),
                "object_radius" => self.object_radius.to_string(),
                "clutter" => self.clutter.to_string(),
                "distractor_ratio" => self.distractor_ratio.to_string(),
                "noise" => self.noise.to_string(),
                "iterations" => self.iterations.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => self.lr.to_string(),
                "seed" => self.seed.to_string(),
                "alphas" => join(self.alphas.iter().map(|a| a.to_string()).collect()),
                "pck_modes" => join(self.pck_modes.iter().map(|m| m.name().to_string()).collect()),
                "probe_grid" => self.probe_grid.to_string(),
                "rhm_sigma" => self.rhm_sigma.to_string(),
                _ => unreachable!("every documented key is listed"),
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}
