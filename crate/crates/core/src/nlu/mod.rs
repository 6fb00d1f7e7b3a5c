//! The multi-task NLU model: an embedding source, a shared BiLSTM, domain
//! and intent softmax heads and a CRF slot tagger.

mod checkpoint;
pub mod crf;
mod lstm;
mod model;
mod schema;

pub use checkpoint::{
    checkpoint_layout, load_model, model_from_bytes, model_to_bytes, save_model, CheckpointLayout,
    TensorEncoding, TensorInfo,
};
pub use crf::{crf_log_partition, crf_nll, crf_nll_with_grad, path_score, viterbi};
pub use lstm::{Dense, Lstm};
pub use model::{nlu_loss, EmbeddingSource, LossParts, NluModel, NluOutput, Prediction, SourceKind};
pub use schema::{TagSchema, Utterance, OOD_DOMAIN, OOD_INTENT, OTHER_TAG};

#[cfg(test)]
pub(crate) use model::tests;
