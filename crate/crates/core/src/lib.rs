//! Text-driven style retrieval and neural style transfer.
//!
//! A freeform style title and description are encoded with tf-idf, projected
//! into a joint text/image embedding space and matched against an indexed
//! corpus of artworks. The best match becomes the style image for a
//! Gram-matrix style transfer that optimizes the pixels of a content image
//! directly with Adam.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! at the crate root fix the scalar to `f64`, which is what the command-line
//! tool, the HTTP service and every on-disk artifact use.

// Validation writes `!(x > 0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod extractor;
pub mod ops;
pub mod pipeline;
pub mod scalar;
pub mod style;
pub mod synthetic;
pub mod tensor;
pub mod text;

pub use corpus::{Corpus, CorpusSample};
pub use embedding::{RankedImage, RetrievalMetrics, TrainConfig};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use style::{LossRecord, StyleConfig};
pub use text::{TextEncoder, TfIdfVocabulary, TextVector};

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ImageBuffer = corpus::ImageBuffer<f64>;
pub type AdamState = adam::AdamState<f64>;
pub type FeatureExtractor = extractor::FeatureExtractor<f64>;
pub type FeatureMap = extractor::FeatureMap<f64>;
pub type ProjectionHead = embedding::ProjectionHead<f64>;
pub type JointHeads = embedding::JointHeads<f64>;
pub type EmbeddingIndex = embedding::EmbeddingIndex<f64>;
pub type Retriever = embedding::Retriever<f64>;
pub type Synthesis = style::Synthesis<f64>;
