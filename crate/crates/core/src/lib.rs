//! Shared-encoder / dual-decoder seq2seq pre-training at desk scale.
//!
//! The model couples a causal generator decoder and a bidirectional
//! discriminator decoder to one encoder. Pre-training combines masked-span
//! generation, replaced token detection, and replaced token denoising;
//! fine-tuning reuses the same losses on parallel pairs, and inference
//! keeps only the encoder + generator.

pub mod autograd;
pub mod corruption;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use autograd::{Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
