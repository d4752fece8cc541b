//! Self-supervised text coherence modeling.
//!
//! Documents are sentence lists. Incoherent negatives are manufactured by
//! permuting sentence order (or by swapping in a sentence from another
//! document), and a scorer `f(D) = w·z + b` on top of a document encoder is
//! trained to rank the original above its negatives. Three training regimes
//! are provided:
//!
//! * **pairwise** – hinge ranking loss against one negative;
//! * **contrastive** – margin-shifted softmax against `N` negatives;
//! * **full** – contrastive loss on locally mined hard negatives, plus a
//!   momentum-encoder similarity loss against a global FIFO queue of
//!   negative representations.
//!
//! Evaluation covers pairwise accuracy, per-category probe accuracy and
//! Krippendorff's alpha agreement with human judgments.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod manifest;
pub mod miner;
pub mod momentum;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod scorer;
pub mod synthetic;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
