//! Dual-latent variational visual question generation.
//!
//! A question decoder is trained from a latent `z` inferred from an image
//! and its expected answer, while a second latent `t`, inferred from the
//! image and only the answer *category*, is pulled towards `z` with a KL
//! term. At inference time questions are decoded from `t`, so no answer is
//! needed. The crate includes a synthetic scene world that doubles as an
//! exact relevance oracle, the training loop, and the evaluation suite.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod seeding;
pub mod tape;
pub mod trainer;
pub mod world;

pub use error::{Result, VqgError};
pub use par::Exec;
