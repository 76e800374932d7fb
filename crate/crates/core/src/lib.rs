pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod gat;
pub mod io;
pub mod label_graph;
pub mod losses;
pub mod mae;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
