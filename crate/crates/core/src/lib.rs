//! Implicit semantic augmentation for metric learning on classifier logits.
//!
//! The crate trains a small two-headed network for domain generalization:
//! a Fourier amplitude-mix co-teacher objective on the classifier head plus a
//! lifted-structure metric loss on the (implicitly augmented) logits of a
//! second head. Alongside training it ships numerical oracles that check the
//! analytic gradients, the closed-form augmentation bound against Monte-Carlo
//! sampling, and the feature/logit distance sandwich.

pub mod augment;
pub mod bound_audit;
pub mod config;
pub mod data;
pub mod error;
pub mod fact;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod par;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
