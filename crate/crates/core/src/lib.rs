pub mod bptt;
pub mod cells;
pub mod conditions;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod init;
pub mod numkit;
pub mod surrogate;
pub mod train;

pub use error::{Error, Result};
