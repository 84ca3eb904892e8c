pub mod baselines;
pub mod cloud;
pub mod error;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod sampling;
pub mod spatial;
pub mod synth;
pub mod tps;
pub mod tracks;
pub mod triangulate;
mod union_find;

pub use error::{Error, Result};
