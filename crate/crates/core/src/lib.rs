//! Miniature BERT-style text classifiers trained from scratch, majority-vote
//! ensembles of shallow members, and the evaluation arithmetic needed to
//! compare an ensemble against a single deeper model on quality and
//! training cost.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors and tape-based reverse-mode autodiff.
//! * [`tokenizer`]: vocabulary building and fixed-length encoding.
//! * [`model`]: embeddings, encoder layers, `[CLS]` pooling, MLM masking,
//!   checkpoints.
//! * [`training`]: dataset split, per-epoch shuffling, Adam, the fit loop.
//! * [`ensemble`]: member training and the two voting rules.
//! * [`evaluation`]: confusion matrices, metrics, timing economics, reports.
//! * [`corpus`]: two-column CSV ingestion and a synthetic corpus generator.
//! * [`experiment`]: the config-driven end-to-end pipeline used by the CLI.
//!
//! The guide in `book/` walks through each piece; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    mod tokenizer {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/pretraining.md")]
    mod pretraining {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/ensembles.md")]
    mod ensembles {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
