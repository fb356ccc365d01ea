//! Data ingestion, loss, optimizer, and the training loops.

pub mod data;
pub mod loss;
pub mod optim;
pub mod train;

pub use data::{
    encode_chat, load_batch, load_chat_samples, synthetic_documents, tokenize_documents,
    write_token_file, Batch, ByteTokenizer, ChatSample, ChatTurn, MixedStreams, TokenStream,
    BYTE_VOCAB_SIZE, EOS_ID,
};
pub use loss::chunked_cross_entropy;
pub use optim::{
    clip_gradients, grad_norm, lr_schedule, transplant_optimizer_state, AdamW, GroupingRule,
    OptimizerConfig,
};
pub use train::{pretrain, sft, StepRecord, TrainReport, TrainSettings};

use thiserror::Error;

use crate::model::{CheckpointError, ModelError};
use crate::polyglu::PolyGluError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("data: {0}")]
    Data(String),
    #[error("loss: {0}")]
    Loss(String),
    #[error("gradient for {param} is not finite; aborting at step {step}")]
    NanGradient { param: String, step: u64 },
    #[error("gradient norm is not finite ({0})")]
    BadGradNorm(f64),
    #[error("loss became non-finite ({loss}) at step {step}; last checkpoint dumped")]
    NanLoss { loss: f64, step: usize },
    #[error("optimizer state: {0}")]
    OptimizerState(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    PolyGlu(#[from] PolyGluError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("metrics: {0}")]
    Metrics(#[from] serde_json::Error),
}
