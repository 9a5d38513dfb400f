//! Continual learning with factorized representations: a shared encoder
//! trained adversarially against a task discriminator, task-specific private
//! encoders and heads that are frozen once their task is done, and a small
//! episodic replay memory.
//!
//! The crate carries its own reverse-mode autodiff ([`tensor`]) and layer
//! library ([`nn`]); [`model`] assembles the architecture, [`losses`] the
//! objectives, and [`harness`] the sequential training protocol.

pub mod container;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/gradient_reversal.md")]
    mod gradient_reversal {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
