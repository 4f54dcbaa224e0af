//! Scribble-driven texture editing pipeline: session storage, the stage
//! runner, the HTTP service and the `scribbletex` CLI.

pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod server;
pub mod session;

pub use config::PipelineConfig;
pub use engine::{Engine, RunOptions, RunReport};
pub use error::PipelineError;
pub use session::{RegionState, Session, Stage};
