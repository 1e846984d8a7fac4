pub mod data;
pub mod error;
pub mod fuzzy;
pub mod metrics;
pub mod model;
pub mod postfilter;
pub mod pseudolabel;
pub mod raster;
pub mod regions;
pub mod selftrain;

pub use error::{KistError, Result};
