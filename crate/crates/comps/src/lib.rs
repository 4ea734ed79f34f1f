//! File formats, configuration, plotting and the experiment runner around
//! `comps-core`.

pub mod config;
pub mod error;
pub mod formats;
pub mod plot;
pub mod records;
pub mod runner;

pub use error::{Error, Result};
