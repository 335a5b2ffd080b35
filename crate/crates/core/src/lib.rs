//! Contrastive self-supervised pretraining for rare, tiny objects in aerial
//! imagery.
//!
//! The crate is `no_std` + `alloc`. It contains the dense tensor and layer
//! primitives, the stochastic view generator, the query/key networks, the
//! MoCo and cross-level group losses, a synthetic aerial mosaic generator with
//! the pretraining and long-tail patch protocols, and the training and
//! evaluation loops. File formats and the command line live in the `aerocon`
//! crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod config;
pub mod contrast;
pub mod data;
mod error;
pub(crate) mod math;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
