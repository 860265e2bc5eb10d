//! Benchmark fixtures; see `benches/`.

use maxmin_core::synthdata::{generate, GenConfig};
use maxmin_core::{LabeledImage, ModelParams, NetConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` training images from the default generator.
pub fn images(n: usize) -> Vec<LabeledImage> {
    let cfg = GenConfig {
        train_per_class: n.div_ceil(2),
        val_per_class: 0,
        test_per_class: 0,
        ..GenConfig::default()
    };
    let mut ds = generate(&cfg).expect("default config is valid");
    ds.train.truncate(n);
    ds.train
}

pub fn params() -> ModelParams {
    ModelParams::init(NetConfig::default(), 0).expect("default config is valid")
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}
