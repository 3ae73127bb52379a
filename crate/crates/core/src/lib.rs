//! Representation learning for Android Smali bytecode.
//!
//! The crate covers the full pipeline: parsing `.smali` classes into
//! normalized instruction streams, training a WordPiece vocabulary, building
//! masked instruction-pair examples, pretraining a compact BERT-style
//! encoder with masked-token, next-instruction and autoencoder heads,
//! producing fixed-size class embeddings by chunking and aggregation, and
//! fine-tuning small frozen-backbone classifier heads for class-level tasks.
//!
//! The numeric core is generic over the scalar type: training runs in `f32`,
//! gradient verification in `f64`. Concrete aliases live at the crate root.

pub mod checkpoint;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
