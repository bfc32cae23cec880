//! Variational mean flow on a causality-aware transformer.
//!
//! The crate carries its own small tensor graph with forward-mode tangents
//! and reverse-mode gradients, the grouped causal attention mask, the
//! velocity network and variational encoder, training and sampling loops,
//! synthetic datasets, evaluation metrics and a Granger causality test.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod granger;
pub mod graph;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sample;
pub mod tensor;
pub mod train;

pub use config::{RunConfig, TimeSampling, TrainConfig, Variant};
pub use data::{Codec, DataSource, Dataset, GmmSpec, ToySequenceSpec};
pub use error::{Error, Result};
pub use granger::{granger_test, latent_causality_report, GrangerResult};
pub use graph::{jvp, Gradients, Graph, Var};
pub use mask::{build_mask, split_with_decay, AttentionMask, GroupSplit, MaskLayout};
pub use model::{Condition, DataShape, FlowNet, ModelConfig, VelocityField, VmfModel};
pub use metrics::MetricReport;
pub use optim::{adam_update, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use sample::{generate, SamplerConfig};
pub use tensor::Tensor;
pub use train::{forward_loss, prepare_step, train_step, FlowBatch, LossReport, Optimizer, Trainer};
