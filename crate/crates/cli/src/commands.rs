//! Subcommand bodies. Each writes its artifacts under `out` and prints a
//! short summary to stdout.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chm_core::chm::VoteKernel;
use chm_core::convnd::{conv_fast, conv_naive, conv_sliced, OpCounter};
use chm_core::eval::{
    pck, pck_csv, pr_csv, pr_curve_pooled, precision_at_recall, reference_size, scored_grid_matches, sig9, KeypointEval,
    ScaleHistogram, ScoredMatch,
};
use chm_core::flow::grid_coord;
use chm_core::image::GrayImage;
use chm_core::kernel::{DumpFormat, SharedKernel};
use chm_core::learn::{make_dataset, prepare, train, TrainPair};
use chm_core::model::Model;
use chm_core::{ChmError, DenseTensor};

use crate::config::RunConfig;
use crate::dataset::{pair_dir, read_dataset, read_keypoints, write_csv, write_keypoints, write_pair};
use crate::error::CliError;

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model, CliError> {
    require(checkpoint, "checkpoint")?;
    let text = fs::read_to_string(checkpoint)?;
    Ok(Model::from_checkpoint(cfg.model_config()?, &text)?)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scfg = cfg.synth_config()?;
    prepare_out(out, cfg)?;
    if cfg.pairs == 0 {
        warn!("pairs = 0: writing an empty dataset");
    }
    let pairs = make_dataset(cfg.seed, cfg.pairs, &scfg)?;
    for (i, p) in pairs.iter().enumerate() {
        write_pair(&pair_dir(out, i), p)?;
    }
    println!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, out: &Path, data: &Path) -> Result<(), CliError> {
    let mcfg = cfg.model_config()?;
    let tcfg = cfg.train_config()?;
    let pairs = read_dataset(data)?;
    prepare_out(out, cfg)?;
    let mut model = Model::new(mcfg, cfg.init_mode(), cfg.seed)?;
    let prepared = prepare(&model, &pairs)?;
    let mut curve = Vec::new();
    let result = train(&mut model, &prepared, &tcfg, |it, loss| {
        info!("iter {it} loss {loss:.6}");
        curve.push((it, loss));
    });
    write_csv(&out.join("loss.csv"), &["iter", "loss"], curve.iter().map(|(i, l)| vec![i.to_string(), sig9(*l)]))?;
    result?;
    fs::write(out.join("checkpoint.txt"), model.to_checkpoint())?;
    match (curve.first(), curve.last()) {
        (Some(a), Some(b)) => println!("trained {} iterations: loss {} -> {}", curve.len(), sig9(a.1), sig9(b.1)),
        _ => println!("0 iterations: wrote the initial checkpoint"),
    }
    Ok(())
}

pub struct MatchArgs<'a> {
    pub checkpoint: &'a Path,
    pub source: &'a Path,
    pub target: &'a Path,
    pub keypoints: Option<&'a Path>,
    pub dump_corr: bool,
}

pub fn match_cmd(cfg: &RunConfig, out: &Path, args: &MatchArgs) -> Result<(), CliError> {
    let model = load_model(cfg, args.checkpoint)?;
    require(args.source, "source image")?;
    require(args.target, "target image")?;
    let kps = match args.keypoints {
        Some(p) => {
            require(p, "keypoints")?;
            Some(read_keypoints(p)?)
        }
        None => None,
    };
    let source = GrayImage::read_pgm(args.source)?;
    let target = GrayImage::read_pgm(args.target)?;
    prepare_out(out, cfg)?;
    let feats = model.features(&source, &target)?;
    let fwd = model.forward(&feats)?;

    let n = model.config.out_grid();
    let flow = fwd.flow.data();
    let rows = (0..n * n).map(|p| {
        let (i, j) = (p / n, p % n);
        vec![
            i.to_string(),
            j.to_string(),
            sig9(grid_coord(j, n)),
            sig9(grid_coord(i, n)),
            sig9(flow[2 * p]),
            sig9(flow[2 * p + 1]),
        ]
    });
    write_csv(&out.join("flow.csv"), &["i", "j", "x_src_norm", "y_src_norm", "x_dst_norm", "y_dst_norm"], rows)?;

    let mut hist = ScaleHistogram::new(model.config.pyramid.scales);
    hist.add(&fwd.scale_args)?;
    fs::write(out.join("scale_hist.csv"), hist.to_csv())?;

    if let Some(kps) = kps {
        let pred = model.transfer(&fwd, &feats, &kps);
        write_keypoints(&out.join("keypoints.csv"), &pred)?;
        println!("transferred {} keypoints", pred.len());
    }
    if args.dump_corr {
        let c = &fwd.corr;
        let rows = (0..c.len()).map(|f| {
            let mut idx: Vec<String> = c.unravel(f).iter().map(|v| v.to_string()).collect();
            idx.push(sig9(c.data()[f]));
            idx
        });
        write_csv(&out.join("correlation.csv"), &["i", "j", "k", "l", "score"], rows)?;
    }
    println!("flow {n}x{n}, modal scale pair {:?}", hist.mode());
    Ok(())
}

/// Forward passes over a dataset with a loaded model.
fn run_dataset(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<(Model, Vec<TrainPair>), CliError> {
    let model = load_model(cfg, checkpoint)?;
    let pairs = read_dataset(data)?;
    if pairs.is_empty() {
        return Err(ChmError::Empty("dataset").into());
    }
    Ok((model, pairs))
}

pub fn eval_pck(cfg: &RunConfig, out: &Path, checkpoint: &Path, data: &Path) -> Result<(), CliError> {
    let (model, pairs) = run_dataset(cfg, checkpoint, data)?;
    prepare_out(out, cfg)?;
    let mut hist = ScaleHistogram::new(model.config.pyramid.scales);
    // (predicted, truth, pair index) for every keypoint.
    let mut preds = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let feats = model.features(&p.source, &p.target)?;
        let fwd = model.forward(&feats)?;
        hist.add(&fwd.scale_args)?;
        let src: Vec<(f64, f64)> = p.keypoints.iter().map(|k| k.0).collect();
        for (pred, kp) in model.transfer(&fwd, &feats, &src).into_iter().zip(&p.keypoints) {
            preds.push((pred, kp.1, i));
        }
    }
    let mut rows = Vec::new();
    for &mode in &cfg.pck_modes {
        let refs = pairs.iter().map(|p| reference_size(mode, &p.target, Some(&p.mask))).collect::<Result<Vec<_>, _>>()?;
        let items: Vec<KeypointEval> =
            preds.iter().map(|&(predicted, truth, i)| KeypointEval { predicted, truth, reference: refs[i] }).collect();
        for &alpha in &cfg.alphas {
            let v = pck(&items, alpha)?;
            println!("PCK@{alpha} ({}): {}", mode.name(), sig9(v));
            rows.push((alpha, mode, v));
        }
    }
    fs::write(out.join("pck.csv"), pck_csv(&rows))?;
    fs::write(out.join("scale_hist.csv"), hist.to_csv())?;
    Ok(())
}

pub fn eval_pr(cfg: &RunConfig, out: &Path, checkpoint: &Path, data: &Path, baseline: bool) -> Result<(), CliError> {
    let (model, pairs) = run_dataset(cfg, checkpoint, data)?;
    prepare_out(out, cfg)?;
    let mut chm: Vec<(Vec<ScoredMatch>, &GrayImage)> = Vec::new();
    let mut rhm: Vec<(Vec<ScoredMatch>, &GrayImage)> = Vec::new();
    for p in &pairs {
        let feats = model.features(&p.source, &p.target)?;
        let fwd = model.forward(&feats)?;
        chm.push((scored_grid_matches(&model, &fwd, &feats, &p.mask, cfg.probe_grid), &p.mask));
        if baseline {
            let b = model.forward_rhm(&feats, VoteKernel::Gaussian { sigma: cfg.rhm_sigma })?;
            rhm.push((scored_grid_matches(&model, &b, &feats, &p.mask, cfg.probe_grid), &p.mask));
        }
    }
    let report = |name: &str, per: &[(Vec<ScoredMatch>, &GrayImage)], file: &str| -> Result<(), CliError> {
        let curve = pr_curve_pooled(per)?;
        fs::write(out.join(file), pr_csv(&curve))?;
        match precision_at_recall(&curve, 0.5) {
            Some(p) => println!("{name}: precision at recall 0.5 = {}", sig9(p)),
            None => println!("{name}: recall 0.5 not reached"),
        }
        Ok(())
    };
    report("chm", &chm, "pr.csv")?;
    if baseline {
        report("rhm", &rhm, "pr_rhm.csv")?;
    }
    Ok(())
}

pub struct BenchArgs {
    pub rank: usize,
    pub size: usize,
    pub kernel: usize,
    pub repeats: usize,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<DenseTensor, CliError> {
    let n = shape.iter().product();
    Ok(DenseTensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?)
}

pub fn bench_conv(cfg: &RunConfig, out: &Path, args: &BenchArgs) -> Result<(), CliError> {
    let (h, k) = (args.size, args.kernel);
    let (shape, kshape) = match args.rank {
        4 => (vec![h; 4], vec![k; 4]),
        6 => {
            let (s, ks) = (cfg.scales, cfg.kernel6d_scale);
            (vec![h, h, s, h, h, s], vec![k, k, ks, k, k, ks])
        }
        r => return Err(CliError::Usage(format!("bench-conv supports rank 4 or 6, got {r}"))),
    };
    if h == 0 || k % 2 == 0 || args.repeats == 0 {
        return Err(CliError::Usage("size and repeats must be positive and the kernel extent odd".into()));
    }
    prepare_out(out, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input = random_tensor(&mut rng, &shape)?;
    let kernel = random_tensor(&mut rng, &kshape)?;
    type ConvFn = fn(&DenseTensor, &DenseTensor, &mut OpCounter) -> chm_core::Result<DenseTensor>;
    let methods: [(&str, ConvFn, usize); 3] =
        [("naive", conv_naive, 1), ("per_slice", conv_sliced, args.repeats), ("fast", conv_fast, args.repeats)];
    let join = |v: &[usize]| v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x");
    let mut oracle: Option<DenseTensor> = None;
    let mut rows = Vec::new();
    for (name, f, reps) in methods {
        let mut best = f64::INFINITY;
        let mut counter = OpCounter::default();
        let mut result = None;
        for _ in 0..reps {
            counter = OpCounter::default();
            let t = Instant::now();
            let r = f(&input, &kernel, &mut counter)?;
            best = best.min(t.elapsed().as_secs_f64() * 1e3);
            result = Some(r);
        }
        let result = result.expect("at least one repeat");
        let diff = oracle.as_ref().map_or(0.0, |o| result.max_abs_diff(o));
        if oracle.is_none() {
            oracle = Some(result);
        }
        println!("{name:>9}: {:>4} 3d calls, {:>12} mul-adds, {best:.2} ms, diff {diff:.2e}", counter.n_3d_conv_calls, counter.n_mul_adds);
        rows.push(vec![
            name.to_string(),
            args.rank.to_string(),
            join(&shape),
            join(&kshape),
            counter.n_3d_conv_calls.to_string(),
            counter.n_mul_adds.to_string(),
            sig9(best),
            sig9(diff),
        ]);
    }
    write_csv(
        &out.join("bench_conv.csv"),
        &["method", "rank", "shape", "kernel", "3d_calls", "mul_adds", "wall_ms", "max_abs_diff_vs_oracle"],
        rows,
    )
}

pub fn dump_kernel(cfg: &RunConfig, out: &Path, layer: &str, format: DumpFormat, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let kernel: SharedKernel = match checkpoint {
        Some(path) => {
            let m = load_model(cfg, path)?;
            match layer {
                "6d" => m.chm6.kernel,
                _ => m.chm4.kernel,
            }
        }
        None => {
            let m = Model::new(cfg.model_config()?, cfg.init_mode(), cfg.seed)?;
            match layer {
                "6d" => m.chm6.kernel,
                _ => m.chm4.kernel,
            }
        }
    };
    prepare_out(out, cfg)?;
    let name = format!("kernel_{layer}.txt");
    fs::write(out.join(&name), kernel.dump(format))?;
    println!("{} {}D kernel: {} classes -> {}", kernel.scheme.name(), kernel.geometry.rank, kernel.n_classes(), name);
    Ok(())
}
