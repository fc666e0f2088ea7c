//! Triple contrastive learning for vision-language pre-training, at a scale
//! that trains on one CPU core.
//!
//! The crate covers procedural image-caption data, toy vision/text/fusion
//! transformers on a small reverse-mode tape, momentum encoders with negative
//! queues, the five training objectives (cross-modal alignment, intra-modal
//! contrast, local mutual-information maximization, image-text matching,
//! masked language modeling), the training loop, and evaluation harnesses.

pub mod autograd;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod momentum;
pub mod objectives;
pub mod seed;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Result, TclError};
pub use tensor::Tensor;
