//! Generative matching networks: conditional variational autoencoders whose
//! prior, recognition model and decoder attend over a conditioning set.
//!
//! The crate holds the tensor tape, network layers, matching loop, model,
//! dataset pipeline, trainer and evaluation harness. Binaries and benches live
//! in sibling crates and use the re-exports below.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod glyph;
pub mod gradcheck;
pub mod matching;
pub mod model;
pub mod nn;
pub mod params;
pub mod real;
pub mod tensor;
pub mod train;

pub use data::{Episode, GlyphClass, GlyphDataset, OmniglotLayout, Split};
pub use error::{GmnError, Result};
pub use eval::{ClassifyMethod, FewShotResult, NllCurve, PerPosition};
pub use glyph::BinaryImage;
pub use matching::{AttentionWeights, ConditioningSetEmbedding};
pub use model::{DiagGaussian, Gmn, GmnConfig, PriorMode, Variant};
pub use nn::Architecture;
pub use params::{ParamGroup, ParamId, ParameterStore};
pub use real::Real;
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainState};
