//! Tokenizer, encoder-decoder transformer, trainer and checkpoints.

mod checkpoint;
mod model;
mod ops;
pub mod tokenizer;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use model::{DecodeState, Encoded, Group, Layout, ModelConfig, TensorInfo, Transformer};
pub use tokenizer::Tokenizer;
pub use train::{encode_pairs, fit_tokenizer, train, EncodedPair, TrainConfig};

/// Log-softmax of one row in 64-bit.
pub fn log_softmax_row<T: crate::numeric::Real>(row: &[T]) -> Vec<f64> {
    ops::log_softmax(row)
}
