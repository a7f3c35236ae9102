//! Gradients, optimization, synthetic data, and training.

pub mod adam;
pub mod synth;
pub mod tape;
pub mod train;

pub use adam::Adam;
pub use synth::{make_dataset, make_synthetic_pair, KeypointPair, Similarity, SynthConfig, TrainPair};
pub use tape::{keypoint_loss, Gradients, Tape, Var};
pub use train::{mean_loss, prepare, train, PreparedPair, TrainConfig, TrainReport};
