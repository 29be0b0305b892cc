//! Persona dialogue generation with self-separated persona groups, one Gaussian
//! latent per group and a decider that weighs them.
//!
//! The guide in `book/` walks through each piece; its code blocks run as
//! doctests of this crate.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decider;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod gradcheck;
pub mod latent;
pub mod model;
pub mod optim;
pub mod params;
pub mod separation;
pub mod training;

pub use error::{ClvError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/separation.md")]
    mod separation {}
    #[doc = include_str!("../../../book/src/latent.md")]
    mod latent {}
    #[doc = include_str!("../../../book/src/decider.md")]
    mod decider {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
