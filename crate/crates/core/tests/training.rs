use chm_core::correlation::{Extractor, PyramidConfig};
use chm_core::kernel::{InitMode, KernelGeometry};
use chm_core::learn::{make_synthetic_pair, mean_loss, prepare, train, SynthConfig, TrainConfig};
use chm_core::model::{Model, ModelConfig};

fn small_model() -> Model {
    let mut c = ModelConfig::with_grid(4);
    c.extractor = Extractor::Patch { side: 4 };
    c.pyramid = PyramidConfig { scales: 2, rho: 4 };
    c.head.kernel_6d = KernelGeometry::new_6d(3, 3).unwrap();
    c.head.kernel_4d = KernelGeometry::new_4d(3).unwrap();
    Model::new(c, InitMode::default(), 0).unwrap()
}

#[test]
fn overfits_a_single_pair() {
    let mut m = small_model();
    let pair = make_synthetic_pair(9, &SynthConfig { image_size: 48, ..SynthConfig::default() }).unwrap();
    let data = prepare(&m, &[pair]).unwrap();
    let before = mean_loss(&m, &data).unwrap();
    let cfg = TrainConfig { iterations: 500, batch_size: 1, lr: 1e-3, seed: 0 };
    train(&mut m, &data, &cfg, |_, _| {}).unwrap();
    let after = mean_loss(&m, &data).unwrap();
    assert!(after <= 0.3 * before, "loss {before:.4} -> {after:.4}");
}

#[test]
fn training_is_deterministic() {
    let pair = make_synthetic_pair(9, &SynthConfig { image_size: 48, ..SynthConfig::default() }).unwrap();
    let cfg = TrainConfig { iterations: 5, batch_size: 1, lr: 1e-3, seed: 4 };
    let run = || {
        let mut m = small_model();
        let data = prepare(&m, std::slice::from_ref(&pair)).unwrap();
        train(&mut m, &data, &cfg, |_, _| {}).unwrap();
        m.flat_params()
    };
    assert_eq!(run(), run());
}
