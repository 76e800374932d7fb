//! Pipeline behind the `mirnet` binary.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{Profile, RunConfig};
pub use error::CliError;
pub use pipeline::Layout;
