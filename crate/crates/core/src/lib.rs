//! SimPGAN at desk scale: a siamese re-identification classifier, two
//! style translators trained with adversarial, cycle and similarity losses,
//! and the tools to generate data for and evaluate them.

pub mod classifier;
pub mod diff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradsuite;
pub mod nn;
pub mod par;
pub mod rng;
pub mod synth;
pub mod train;
pub mod transgan;

pub use error::{Error, Result};
