//! Language-embedding learning with speaker-adversarial disentanglement on a
//! synthetic multilingual corpus.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), a deterministic corpus generator ([`synthdata`]), a dilated
//! convolution encoder with statistics pooling and a gradient-reversal
//! speaker branch ([`model`]), the two-stage freeze-then-finetune training
//! protocol ([`training`]), and probe/PCA/silhouette evaluation with SVG
//! plots ([`eval`], [`plot`]).

pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod par;
pub mod plot;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use config::{CorpusConfig, Stage, TrainConfig};
pub use tensor::Tensor;
