//! Dual-consistency prompt generation for few-shot segmentation at desk scale.
//!
//! The crate carries its own small reverse-mode tape ([`Tape`]) over dense
//! `f64` tensors, a deterministic stand-in encoder and decoder, the prompt
//! generator with its positive and negative branches, synthetic episode and
//! video generators, metrics, and a trainer.

pub mod attention;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod video;

pub use attention::{AttentionBlock, CycleBias};
pub use config::RunConfig;
pub use decoder::DecoderConfig;
pub use encoder::{EncodedImage, EncoderConfig, StubEncoder};
pub use episode::{Episode, FoldSplit};
pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use pipeline::{Ablation, ModelConfig, ModelParams, PromptSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Bias, Tensor, MASKED};
pub use train::{AdamState, EvalConfig, TrainConfig, TrainOutcome};
pub use video::{MaskTube, TransformSpec};
