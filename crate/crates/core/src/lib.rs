//! End-to-end Transformer OCR engine for textline images.
//!
//! Images of rendered textlines go in, wordpiece text comes out. The
//! crate contains the whole pipeline: a minimal reverse-mode autodiff
//! tape, a ViT-style patch encoder, an autoregressive decoder with
//! incremental decoding, greedy/beam search, a trainable BPE
//! tokenizer, training with teacher forcing and augmentation, a
//! synthetic textline generator, evaluation metrics, and a binary
//! checkpoint container with partial weight import.

pub mod augment;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runtime;
pub mod search;
pub mod tensor;
pub mod textgen;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use model::{ModelConfig, OcrModel};
pub use tensor::{Dtype, Element, Graph, ParamSet, Tensor};
pub use tokenizer::{TokenId, TokenSequence, Tokenizer};
