pub mod backend;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod retriever;
pub mod run;
pub mod schema;
pub mod synth;
pub mod state;

pub use error::{Error, ErrorClass, Result};
