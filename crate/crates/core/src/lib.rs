pub mod alignment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod model;
pub mod numerics;
pub mod tokenizers;
pub mod training;
pub mod transfer;
pub mod verify;

pub use error::{Error, Result};
