//! Quantized-embedding controllable diffusion language model.
//!
//! A small continuous diffusion LM trained end to end with (optionally
//! quantized) word embeddings, sampled with classifier guidance or
//! classifier-free length control, fine-tuned with low-rank adapters and
//! decoded with minimum Bayes risk selection.

pub mod checkpoint;
pub mod config;
pub mod control;
pub mod corpus;
pub mod denoiser;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod quantize;
pub mod schedule;
pub mod teacher;
pub mod tensor;
pub mod training;

pub use checkpoint::{ArtifactKind, Checkpoint, ModelArtifact};
pub use config::Configurable;
pub use control::{ControlClassifier, ControlTarget, GuidanceConfig};
pub use corpus::Labels;
pub use denoiser::{DenoiserConfig, DenoiserModel};
pub use embedding::{ClampMode, EmbeddingTable, Vocabulary};
pub use error::{Error, Result};
pub use eval::{EvalReport, SampleSet};
pub use teacher::{Teacher, TeacherConfig};
pub use training::{TrainConfig, TrainMode, TrainReport, Trained};
pub use quantize::{QuantKind, QuantizerSpec};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use tensor::{finite_diff_check, Tape, Tensor, Var};
