//! Joint training of a 1D image tokenizer with an autoregressive generator.
//!
//! The tokenizer (ViT encoder, index-backpropagation quantizer, ViT decoder)
//! and a class-conditional causal transformer are optimized in one stage:
//! next-token prediction gradients flow into the tokenizer through soft
//! indices, and the generator's teacher-forcing predictions are decoded back
//! to pixels so that collapsing the code space does not pay off.
//!
//! Everything is generic over the scalar type; `*32` / `*64` aliases fix it.

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod nn;
pub mod objectives;
pub mod ordering;
pub mod quantizer;
pub mod tokenizer;
pub mod trainer;

pub use jointok_autograd as autograd;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, RawCheckpoint};
pub use config::{resolve, AlignMode, Precision, TrainConfig};
pub use data::{BatchSchedule, Dataset};
pub use error::{Error, Result};
pub use evaluator::{CollapseReport, FeatureExtractor, FeatureStatistics, GenMetrics, GuidanceSpec, ReconMetrics};
pub use objectives::{LossBundle, LossWeights};
pub use ordering::{run_ordering_experiment, OrderingOptions, OrderingReport, TokenOrder};
pub use tokenizer::ImageBatch;
pub use trainer::{cosine_lr, ema_update, JointModel, TrainState};

pub type Tensor32 = jointok_autograd::Tensor<f32>;
pub type Tensor64 = jointok_autograd::Tensor<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Dataset64 = Dataset<f64>;
