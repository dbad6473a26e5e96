//! Counterfactual survival estimation with representation balancing.
//!
//! A network embeds covariates, balances the treated and control embeddings with
//! a Sinkhorn divergence, and predicts discrete-time survival for both arms.
//! See the book under `book/` for a walk-through.

pub mod config;
pub mod dataset;
pub mod discretize;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod train;
pub mod simulate;
pub mod sinkhorn;
pub mod theory;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/discretization.md")]
    mod discretization {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/theory.md")]
    mod theory {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
