//! Minibatch Adam training on keypoint pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::convnd::OpCounter;
use crate::error::{ChmError, Result};
use crate::learn::adam::Adam;
use crate::learn::synth::{KeypointPair, TrainPair};
use crate::model::{Model, PairFeatures};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 100, batch_size: 4, lr: 1e-3, seed: 0 }
    }
}

/// Features and keypoints of one pair, computed once.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub features: PairFeatures,
    pub keypoints: Vec<KeypointPair>,
}

pub fn prepare(model: &Model, pairs: &[TrainPair]) -> Result<Vec<PreparedPair>> {
    pairs
        .iter()
        .map(|p| Ok(PreparedPair { features: model.features(&p.source, &p.target)?, keypoints: p.keypoints.clone() }))
        .collect()
}

/// Mean loss over `data`.
pub fn mean_loss(model: &Model, data: &[PreparedPair]) -> Result<f64> {
    if data.is_empty() {
        return Err(ChmError::Empty("dataset"));
    }
    let mut total = 0.0;
    for p in data {
        total += model.loss(&p.features, &p.keypoints)?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Batch loss at every iteration, before that iteration's update.
    pub losses: Vec<f64>,
    pub counter: OpCounter,
}

/// Runs `cfg.iterations` Adam steps on minibatches drawn without
/// replacement from reshuffled epochs. `on_iter` sees `(iteration, loss)`.
pub fn train(
    model: &mut Model,
    data: &[PreparedPair],
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(ChmError::Empty("dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(ChmError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut params = model.flat_params();
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut counter = OpCounter::default();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        let batch = cfg.batch_size.min(data.len());
        for _ in 0..batch {
            if cursor == data.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let p = &data[order[cursor]];
            cursor += 1;
            let (l, g) = model.loss_and_grad(&p.features, &p.keypoints, &mut counter)?;
            loss += l / batch as f64;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / batch as f64);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ChmError::Diverged(it));
        }
        losses.push(loss);
        on_iter(it, loss);
        adam.step(&mut params, &grad)?;
        model.set_flat_params(&params)?;
    }
    Ok(TrainReport { losses, counter })
}
