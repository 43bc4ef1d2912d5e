//! Fixtures shared by the benchmarks.

use minc_core::dataset::{make_block_graph, sample_pairs, BlockGraphParams};
use minc_core::objective::Batch;
use minc_core::trainer::TrainConfig;
use minc_core::{EmbeddingModel, FeatureTable, JointDistribution, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random symmetric `n × n` matrix with entries in `[−1, 1]`.
pub fn random_symmetric(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = rng.random_range(-1.0..1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Block graph with `classes × per_class` support points and default noise.
pub fn block_graph(classes: usize, per_class: usize) -> (JointDistribution, FeatureTable) {
    make_block_graph(&BlockGraphParams { num_classes: classes, points_per_class: per_class, ..Default::default() })
        .expect("valid block graph")
}

/// Encoder with the default training architecture for `features`.
pub fn default_model(features: &FeatureTable, seed: u64) -> EmbeddingModel {
    let cfg = TrainConfig::default();
    EmbeddingModel::new(&cfg.layer_sizes(features.dim()), cfg.normalize, seed).expect("valid layer sizes")
}

/// Sampled minibatch with cross-pair negatives.
pub fn sampled_batch(joint: &JointDistribution, size: usize, seed: u64) -> Batch {
    let pairs = sample_pairs(joint, size, seed).expect("valid batch size");
    Batch::from_pairs(&pairs).expect("non-empty batch")
}
