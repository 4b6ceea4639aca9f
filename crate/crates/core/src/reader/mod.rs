//! Discriminator-augmented encoder-decoder reader.
//!
//! Each retrieved document is prepended with the question and encoded
//! independently; the per-document encodings are concatenated along the
//! sequence dimension for the decoder to attend over, and a one-layer
//! discriminator head classifies each document as perturbed or original
//! from its mean-pooled encoding. Training combines the generative QA loss
//! with the discrimination BCE and a contrastive term.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use loss::{
    bce_loss, contrastive_loss, qa_loss, total_loss, ContraScore, LossBreakdown, LossError,
    LossFlags, LossInputs, QaLoss,
};
pub use model::{ComponentWeights, EncodedBatch, Prediction, PreparedExample, ReaderModel};
pub use train::{
    train, EntityResampler, EpochData, EpochLoss, EpochSampler, MultiSampler, StaticSplit,
    TrainOutcome,
};
pub use vocab::Vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reader hyperparameters. Paper-scale defaults are kept where they are
/// cheap (learning rate, sequence length, batch/accumulation, seed); width
/// and depth default to desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderConfig {
    pub vocab_size: usize,
    /// Embedding width E.
    pub embed_dim: usize,
    /// Maximum tokens per (question + document) sequence, T.
    pub max_seq_len: usize,
    /// Documents per question, M.
    pub num_docs: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub epochs: usize,
    pub loss_flags: LossFlags,
    pub contra_score: ContraScore,
    /// Probability at or above which a document is flagged perturbed.
    pub disc_threshold: f64,
    pub seed: u64,
    /// Maximum decoded answer tokens (including the end marker).
    pub max_answer_len: usize,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        ReaderConfig {
            vocab_size: 512,
            embed_dim: 64,
            max_seq_len: 200,
            num_docs: 5,
            encoder_layers: 1,
            decoder_layers: 1,
            learning_rate: 1e-4,
            batch_size: 1,
            grad_accumulation: 64,
            epochs: 10,
            loss_flags: LossFlags::default(),
            contra_score: ContraScore::Logit,
            disc_threshold: 0.5,
            seed: 42,
            max_answer_len: 8,
        }
    }
}

impl ReaderConfig {
    pub fn validate(&self) -> Result<(), ReaderError> {
        if self.embed_dim == 0 || self.max_seq_len == 0 || self.num_docs == 0 {
            return Err(ReaderError::Config(
                "embed_dim, max_seq_len and num_docs must be positive".into(),
            ));
        }
        if self.vocab_size < 5 {
            return Err(ReaderError::Config("vocab_size too small".into()));
        }
        if !(self.disc_threshold > 0.0 && self.disc_threshold < 1.0) {
            return Err(ReaderError::Config(
                "disc_threshold must lie strictly between 0 and 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(ReaderError::Config("learning_rate must be positive".into()));
        }
        if self.max_answer_len == 0 || self.batch_size == 0 || self.grad_accumulation == 0 {
            return Err(ReaderError::Config(
                "max_answer_len, batch_size and grad_accumulation must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ReaderError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error(
        "non-finite loss at epoch {epoch}, step {step} (l_qa={l_qa}, l_bce={l_bce}, \
         l_contra={l_contra}, max |grad| = {max_grad})"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        l_qa: f64,
        l_bce: f64,
        l_contra: f64,
        max_grad: f64,
    },
    #[error("loss error: {0}")]
    Loss(#[from] LossError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
