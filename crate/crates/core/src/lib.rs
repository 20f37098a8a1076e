//! Dual-mode vision-language encoder.
//!
//! One set of Transformer weights runs either as a single stream over the
//! concatenated image and text sequence, or as two streams in which the
//! image stream cross-attends to the final text states in its upper layers.
//! The crate carries everything needed to train it end to end at desk scale:
//! a float64 autodiff tape, the four pre-training objectives, downstream
//! heads, and a synthetic scene/caption world.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod heads;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod seed;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
