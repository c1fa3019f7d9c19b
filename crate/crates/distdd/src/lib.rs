//! Experiment harness for federated dataset distillation: JSON configs,
//! dataset files, task orchestration and CSV/JSON artifacts.

pub mod config;
pub mod convergence;
pub mod error;
pub mod io;
pub mod report;
pub mod run;
pub mod summary;

pub use config::{ExperimentConfig, Task};
pub use error::{HarnessError, Result};
pub use run::run;
pub use summary::RunSummary;
