//! Leduc Hold'em opponent-exploitation workbench.

pub mod archetypes;
pub mod curriculum;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod game;
pub mod io;
pub mod model;
pub mod seed;
pub mod strategy;
pub mod tabular;
pub mod tree;

pub use error::{Error, Result};
