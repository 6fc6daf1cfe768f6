//! Recurrent video inversion and editing with a toy style-based generator.

pub mod checkpoint;
pub mod composition;
pub mod config;
pub mod encoders;
pub mod error;
pub mod flow;
pub mod generator;
pub mod imaging;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synthdata;
pub mod workflow;

pub use error::{Error, Result};
