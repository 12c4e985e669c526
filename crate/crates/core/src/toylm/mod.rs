// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level tokenizer and a small decoder-only transformer language model.
//!
//! The forward pass accepts an additive [`SpanPatch`] on the input word
//! embeddings, which is how stored editing embeddings reach the model.

mod checkpoint;
mod model;
mod tokenizer;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_model, save_model, CHECKPOINT_MAGIC};
pub use model::{apply_span_patch, LanguageModel, LayerParams, ModelConfig, ModelParams, SpanPatch};
pub use tokenizer::{TokenId, Tokenizer, BOS_TOKEN, PAD_TOKEN};
pub use train::{fact_recall, pretrain, TrainConfig, TrainReport, TrainingSet};
