pub mod affine;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod multiscale;
pub mod network;
pub mod params;
pub mod run;
pub mod seed;
pub mod training;
pub mod visualize;

pub use error::{Error, Result};
