pub mod attention;
pub mod config;
pub mod control_plane;
pub mod error;
pub mod features;
pub mod fusion;
pub mod key_selection;
mod linalg;
pub mod pipeline;
pub mod quantization;
pub mod symbolic;
pub mod theory;
pub mod workload;

pub use error::{Error, Result};
