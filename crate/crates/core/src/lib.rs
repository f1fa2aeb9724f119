pub mod commands;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod metric_param;
pub mod objective;
pub mod photometric;
pub mod pipeline;
pub mod prior;
pub mod scene;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
