pub mod config;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod geometry;
pub mod gradcheck;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod scene;
pub mod storage;
pub mod triplane;

pub use error::{Error, Result};
