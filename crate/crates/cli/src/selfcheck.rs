//! Built-in invariant checks, run by `chm selfcheck`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chm_core::convnd::{conv_fast, conv_naive, conv_sliced, OpCounter};
use chm_core::correlation::{Extractor, PyramidConfig};
use chm_core::eval::ScaleHistogram;
use chm_core::flow::{kernel_softmax, regular_grid, soft_sampler};
use chm_core::kernel::{build_sharing, InitMode, KernelGeometry, SharingScheme};
use chm_core::learn::{make_synthetic_pair, SynthConfig};
use chm_core::model::{Model, ModelConfig};
use chm_core::DenseTensor;

use crate::config::RunConfig;
use crate::dataset::write_csv;
use crate::error::CliError;

type Check = (&'static str, fn(u64) -> Result<(bool, String), CliError>);

const CHECKS: &[Check] = &[
    ("parameter_counts", parameter_counts),
    ("conv_oracle", conv_oracle),
    ("conv_call_counts", conv_call_counts),
    ("gradient", gradient),
    ("normalization", normalization),
];

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<DenseTensor, CliError> {
    let n = shape.iter().product();
    Ok(DenseTensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?)
}

fn parameter_counts(_: u64) -> Result<(bool, String), CliError> {
    let g4 = KernelGeometry::new_4d(5)?;
    let g6 = KernelGeometry::new_6d(5, 3)?;
    let mut got = Vec::new();
    for g in [g4, g6] {
        for s in [SharingScheme::Iso, SharingScheme::Psi, SharingScheme::Full] {
            got.push(build_sharing(g, s)?.n_classes());
        }
    }
    Ok((got == [15, 55, 625, 45, 220, 5625], format!("iso/psi/full 4D then 6D: {got:?}")))
}

fn conv_oracle(seed: u64) -> Result<(bool, String), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..10 {
        let rank = if case < 6 { 4 } else { 6 };
        let max = if rank == 4 { 7 } else { 4 };
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=max)).collect();
        let kshape: Vec<usize> = (0..rank).map(|_| 2 * rng.random_range(0..=2usize) + 1).collect();
        let input = random_tensor(&mut rng, &shape)?;
        let kernel = random_tensor(&mut rng, &kshape)?;
        let a = conv_fast(&input, &kernel, &mut OpCounter::default())?;
        let b = conv_naive(&input, &kernel, &mut OpCounter::default())?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok((worst <= 1e-10, format!("10 random cases, max abs diff {worst:.2e}")))
}

fn conv_call_counts(seed: u64) -> Result<(bool, String), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_tensor(&mut rng, &[8; 4])?;
    let kernel = random_tensor(&mut rng, &[3; 4])?;
    let (mut f, mut s) = (OpCounter::default(), OpCounter::default());
    conv_fast(&input, &kernel, &mut f)?;
    conv_sliced(&input, &kernel, &mut s)?;
    Ok((
        f.n_3d_conv_calls == 3 && s.n_3d_conv_calls == 24,
        format!("k=3 H=8: fast {} calls, per-slice {}", f.n_3d_conv_calls, s.n_3d_conv_calls),
    ))
}

fn tiny_model(seed: u64) -> Result<Model, CliError> {
    let mut cfg = ModelConfig::with_grid(4);
    cfg.extractor = Extractor::Patch { side: 4 };
    cfg.pyramid = PyramidConfig { scales: 2, rho: 4 };
    cfg.head.kernel_6d = KernelGeometry::new_6d(3, 3)?;
    cfg.head.kernel_4d = KernelGeometry::new_4d(3)?;
    Ok(Model::new(cfg, InitMode::NearIdentity { sigma: 0.05 }, seed)?)
}

fn gradient(seed: u64) -> Result<(bool, String), CliError> {
    let model = tiny_model(seed)?;
    let pair = make_synthetic_pair(seed, &SynthConfig { image_size: 40, ..SynthConfig::default() })?;
    let feats = model.features(&pair.source, &pair.target)?;
    let (_, grad) = model.loss_and_grad(&feats, &pair.keypoints, &mut OpCounter::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut offset, mut worst, mut n) = (0, 0.0f64, 0);
    for g in model.param_groups() {
        let idx = offset + rng.random_range(0..g.len);
        offset += g.len;
        let at = |d: f64| -> Result<f64, CliError> {
            let mut p = model.flat_params();
            p[idx] += d;
            let mut m = model.clone();
            m.set_flat_params(&p)?;
            Ok(m.loss(&feats, &pair.keypoints)?)
        };
        let fd = (at(1e-5)? - at(-1e-5)?) / 2e-5;
        worst = worst.max((fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-8));
        n += 1;
    }
    Ok((worst <= 1e-4, format!("{n} parameters, max rel err {worst:.2e}")))
}

fn normalization(seed: u64) -> Result<(bool, String), CliError> {
    let model = tiny_model(seed)?;
    let pair = make_synthetic_pair(seed + 1, &SynthConfig { image_size: 40, ..SynthConfig::default() })?;
    let feats = model.features(&pair.source, &pair.target)?;
    let fwd = model.forward(&feats)?;
    let n = model.config.out_grid();
    let probs = kernel_softmax(&fwd.corr, &model.config.softargmax)?.probs;
    let rows = probs.data().chunks(n * n).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let grid = regular_grid(n, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samplers = (0..50)
        .map(|_| {
            let kp = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            (soft_sampler(kp, &grid, model.config.softargmax.tau).sum() - 1.0).abs()
        })
        .fold(0.0, f64::max);
    let in_box = fwd.flow.data().iter().all(|v| (-1.0..=1.0).contains(v));
    let mut hist = ScaleHistogram::new(model.config.pyramid.scales);
    hist.add(&fwd.scale_args)?;
    let votes = hist.total() == (model.config.grid as u64).pow(4);
    Ok((
        rows <= 1e-9 && samplers <= 1e-12 && in_box && votes,
        format!("softmax rows {rows:.1e}, samplers {samplers:.1e}, flow in box {in_box}, scale votes complete {votes}"),
    ))
}

pub fn selfcheck(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut failed = 0;
    for (name, f) in CHECKS {
        let (ok, detail) = f(cfg.seed).unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        let status = if ok { "pass" } else { "FAIL" };
        println!("{status:>4}  {name}: {detail}");
        rows.push(vec![name.to_string(), status.to_string(), detail]);
    }
    write_csv(&out.join("selfcheck.csv"), &["check", "status", "detail"], rows)?;
    if failed > 0 {
        return Err(CliError::Selfcheck { failed, total: CHECKS.len() });
    }
    println!("all {} checks passed", CHECKS.len());
    Ok(())
}
