//! Standard-library companion to `llvq-core`: dataset ingestion, the
//! training driver, census and timing reports, checkpoints and the CLI.

pub mod bench;
pub mod data;
pub mod io;
pub mod repro;
pub mod report;
pub mod run;

pub use llvq_core as core;
