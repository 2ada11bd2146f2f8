// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-level interpretation and editing for pre-LN vision transformers.
//!
//! Every token of every layer can be pushed through the rest of the encoder
//! with self-attention removed, landing in the joint image-text space where
//! it is read off against a text vocabulary. Tokens whose reading matches a
//! word list can then be zeroed or swapped to change what the model sees.

pub mod edit;
pub mod engine;
pub mod error;
pub mod eval;
pub mod interpret;
pub mod io;
pub mod saliency;
pub mod service;
pub mod tensor;

pub use edit::{InterventionPlan, MatchMode, Replacement, ReplacementValue, WordList};
pub use engine::{forward_full, ActivationTrace, RankedText, TokenRef};
pub use error::{Error, Result};
pub use interpret::{interpret, DriftTable, Interpretation, Smoothing};
pub use io::bundle::{Manifest, ModelBundle};
pub use io::image::{preprocess, BoxAnnotation, ImageInput};
pub use io::vocab::Vocabulary;
pub use tensor::Tensor;
