//! Command implementations behind the `metastyle` binary.

pub mod ablate;
pub mod common;
pub mod generate;
pub mod plot;
pub mod report;
pub mod scenario_io;
pub mod table;
pub mod train;
