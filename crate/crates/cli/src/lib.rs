//! Batch front end: CSV ingestion, spatial clustering, the estimation
//! pipeline and the simulation driver.

pub mod analysis;
pub mod config;
pub mod error;
pub mod ingest;
pub mod output;
pub mod simulate;

pub use analysis::{analyze, run_analysis, AnalysisResult};
pub use config::AnalysisConfig;
pub use error::{CliError, Result};
pub use ingest::{ingest_csv, Standardization};
pub use simulate::run_simulation;
