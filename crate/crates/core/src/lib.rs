pub mod cli;
pub mod cluster;
pub mod config;
pub mod cross;
pub mod data;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod pretrain;

pub use error::{Error, Result};
