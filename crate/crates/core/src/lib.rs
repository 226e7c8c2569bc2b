//! Risk-neutral joint simulation of a spot price and its floating grid of
//! call options.

pub mod error;
pub mod codec;
pub mod config;
pub mod diffnet;
pub mod flow;
pub mod grid;
pub mod io;
pub mod measure;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
