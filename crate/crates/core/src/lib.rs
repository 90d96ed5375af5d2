//! Attention-guided contrastive unlearning for Vision Transformers.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode autodiff tape and the `LTVT`
//!   checkpoint format.
//! - [`vit`]: a plain ViT classifier whose forward pass can return the final
//!   block's attention weights.
//! - [`masking`]: class-token attention scores, top-k patch selection and
//!   pixel masking.
//! - [`unlearning`]: the contrastive loss, the two-phase unlearning pipeline
//!   and the Retrain / FT / GA / RL baselines.
//! - [`evaluation`]: FA / RA / TA, the loss-threshold membership inference
//!   attack, average gap and the masking sweep.
//! - [`training`]: mini-batch SGD used by every trainer above.
//! - [`data`]: the synthetic dataset, forget/retain splits and the `LTDS`
//!   dataset format.

mod binfmt;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod tensor;
pub mod training;
pub mod unlearning;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
