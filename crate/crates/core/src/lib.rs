//! Self-supervised learning of object/context associations: pair mining,
//! a two-stream encoder with an external memory, training, evaluation
//! protocols, human click maps and a synthetic scene world.

pub mod augment;
pub mod blob;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod humanmaps;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod objective;
pub mod pairs;
pub mod rng;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
