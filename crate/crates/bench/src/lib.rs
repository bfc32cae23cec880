//! Fixtures shared by the benchmarks.

use vmflow::data::{make_sequence_dataset, Codec};
use vmflow::{Dataset, ModelConfig, ToySequenceSpec, TrainConfig, Trainer, Variant, VmfModel};

/// Sequence dataset and its codec at the default desk-scale size.
pub fn sequences(seed: u64) -> (Dataset, Codec) {
    make_sequence_dataset(&ToySequenceSpec { seed, ..Default::default() }).expect("sequence dataset")
}

pub fn model_config(width: usize, blocks: usize) -> ModelConfig {
    ModelConfig {
        width,
        heads: 2,
        blocks,
        mlp_ratio: 2,
        latent_dim: 4,
        encoder_hidden: width,
        time_freqs: 6,
        dispersive_layer: 1,
        max_sample_len: 16,
    }
}

pub fn trainer(variant: Variant, data: &Dataset, width: usize, batch_size: usize) -> Trainer<VmfModel> {
    let net = VmfModel::new(&model_config(width, 2), data.shape(), variant.variational(), 0).expect("model");
    let cfg = TrainConfig {
        batch_size,
        ..TrainConfig::for_variant(variant)
    };
    Trainer::new(net, cfg).expect("trainer")
}
