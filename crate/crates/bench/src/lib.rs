//! Fixtures shared by the criterion benches.

use advrf::data_eval::{generate_synthetic, RetrievalDataset, Split};
use advrf::tensor::Tensor;
use advrf::trainer::{TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The desk_default dataset and a freshly initialized training state.
pub fn desk_setup() -> (TrainConfig, RetrievalDataset, TrainState) {
    let cfg = TrainConfig::default();
    let data = generate_synthetic(&cfg.synthetic_spec()).expect("synthetic dataset");
    let state = TrainState::new(&cfg, data.num_seen()).expect("train state");
    (cfg, data, state)
}

/// The first `n` seen images with labels and part masks.
pub fn seen_batch(data: &RetrievalDataset, n: usize) -> (Tensor<f32>, Vec<usize>, Tensor<f32>) {
    let seen = data.view(Split::Seen).expect("seen split");
    let idx: Vec<usize> = (0..n).collect();
    let (x, y, m) = seen.batch(&idx);
    (x, y, m.expect("synthetic part masks"))
}
