//! `summary.json`: what a run did and where its files are.

use distdd_core::flcore::{Aggregation, CostLedger, CostModel};
use distdd_core::models::ModelSpec;
use distdd_core::privacy::DpConfig;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Task, TunePoint};
use crate::convergence::{DistillConvergence, FedavgConvergence};

/// Bumped whenever the summary layout changes; `report` refuses to mix
/// versions.
pub const SCHEMA: u32 = 1;

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: u32,
    pub task: Task,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub results: Results,
    /// Files written next to the summary, relative to the output directory.
    pub artifacts: Vec<String>,
    pub ledger: Option<LedgerTotals>,
    pub privacy: Option<PrivacyReport>,
    pub convergence: Option<Convergence>,
    /// Excluded from any determinism comparison.
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Results {
    Distill(DistillResult),
    Fedavg(FedavgResult),
    Sweep(SweepResult),
    Tune(TuneResult),
    Nas(NasResult),
    Report(ReportResult),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Convergence {
    Distill(DistillConvergence),
    Fedavg(FedavgConvergence),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub total_bytes: u64,
    pub network_rounds: usize,
    pub modeled_seconds: f64,
}

impl LedgerTotals {
    pub fn of(ledger: &CostLedger, model: &CostModel) -> Self {
        Self {
            uplink_bytes: ledger.uplink_bytes(),
            downlink_bytes: ledger.downlink_bytes(),
            total_bytes: ledger.total_bytes(),
            network_rounds: ledger.network_rounds(),
            modeled_seconds: ledger.time(model),
        }
    }
}

/// Privacy of a single uploaded class gradient. No composition over rounds
/// or classes is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub clip: f64,
    pub noise_multiplier: f64,
    pub noise_std: f64,
    pub delta: f64,
    /// `None` when no noise is added.
    pub epsilon_per_message: Option<f64>,
    pub accounting: String,
}

impl PrivacyReport {
    pub fn of(dp: &DpConfig) -> Self {
        Self {
            clip: dp.clip,
            noise_multiplier: dp.noise_multiplier,
            noise_std: dp.noise_std(),
            delta: dp.delta,
            epsilon_per_message: dp.epsilon().ok(),
            accounting: "per-message Gaussian mechanism, sensitivity 2C, no composition".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillResult {
    /// Test accuracy of a fresh model trained only on the synthetic set.
    pub accuracy: f64,
    /// Test accuracy of the same training run on the full training set.
    pub full_data_accuracy: f64,
    pub relative_accuracy: f64,
    pub synthetic_rows: usize,
    pub skipped_cells: usize,
    pub bad_clients: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedavgResult {
    pub accuracy: f64,
}

/// One sweep job. Re-running the task with `seed` and this row's grid
/// values reproduces it bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub seed: u64,
    pub alpha: f64,
    pub rho: f64,
    pub aggregation: Aggregation,
    pub noise_multiplier: Option<f64>,
    pub epsilon: Option<f64>,
    pub accuracy: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

/// Mean over the repeats of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub rho: f64,
    pub aggregation: Aggregation,
    pub noise_multiplier: Option<f64>,
    pub runs: usize,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub grid: Vec<TunePoint>,
    /// Validation accuracy per grid point when training on the synthetic set.
    pub distdd_validation: Vec<f64>,
    /// Validation accuracy per grid point after a full FedAvg run.
    pub fedavg_validation: Vec<f64>,
    pub distdd_choice: usize,
    pub fedavg_choice: usize,
    /// Distillation plus local tuning; the tuning adds compute only.
    pub distdd_ledger: LedgerTotals,
    pub distdd_post_distill_bytes: u64,
    pub fedavg_ledger: LedgerTotals,
    /// Bytes of a single FedAvg run.
    pub fedavg_run_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NasResult {
    pub candidates: Vec<ModelSpec>,
    pub distdd_validation: Vec<f64>,
    pub fedavg_validation: Vec<f64>,
    pub distdd_choice: usize,
    pub fedavg_choice: usize,
    /// Test accuracy of FedAvg retraining of the candidate picked on the
    /// synthetic set.
    pub fedavg_after_distdd_accuracy: f64,
    /// Test accuracy of the candidate picked by exhaustive FedAvg search.
    pub fedavg_nas_accuracy: f64,
    /// Bytes of the search itself, after distillation.
    pub distdd_search_bytes: u64,
    /// Distillation, search compute and the final FedAvg retraining.
    pub distdd_ledger: LedgerTotals,
    pub fedavg_ledger: LedgerTotals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportResult {
    pub summaries: usize,
    pub tables: Vec<String>,
}
