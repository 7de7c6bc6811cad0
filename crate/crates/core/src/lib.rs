pub mod attention;
pub mod bench;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod streaming;
pub mod training;

pub use error::{Error, Result};
