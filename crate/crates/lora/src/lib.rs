//! Framework-free toy multimodal model with LoRA adapters.
//!
//! A small three-stage model (patch encoder, aligner, causal decoder) in
//! double precision, low-rank adapters on its projection weights, a
//! teacher-forced fine-tuning loss, and plain gradient descent restricted to
//! a chosen set of modules. Gradients come from a small reverse-mode tape.

mod checkpoint;
mod corpus;
mod lora;
mod model;
mod sft;
mod tape;
mod tensor;

use std::path::PathBuf;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use corpus::{toy_corpus, vocab, Corpus, CorpusPath, CORPUS_VOCAB};
pub use lora::{lora_merge, AdapterSet, LoraAdapter};
pub use model::{Element, ImageGrid, ModelConfig, Module, ToyMllm, ToySample, IMAGE_SIDE, PATCHES, PATCH_DIM};
pub use sft::{
    adapter_grads, grad_check, greedy_generate, sft_loss, sft_loss_terms, sft_step, train, AdapterGrad, Generation,
    GradCheck, LogEntry, SftConfig, TrainSummary,
};
pub use tape::{Grads, Tape, Var};
pub use tensor::Mat;

pub const BOS: usize = 0;
pub const EOS: usize = 1;

#[derive(Debug, thiserror::Error)]
pub enum LoraError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no weight named {0:?}")]
    UnknownTarget(String),
    #[error("weight {target:?} is not a projection and cannot carry an adapter")]
    NotAdaptable { target: String },
    #[error("rank {rank} too large for {target:?}: at most {max}")]
    RankTooLarge { target: String, rank: usize, max: usize },
    #[error("sample has an empty target")]
    EmptyTarget,
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence of {len} positions exceeds the positional table of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("module {0} is trainable but has no adapters")]
    MissingAdapters(Module),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = LoraError> = std::result::Result<T, E>;
