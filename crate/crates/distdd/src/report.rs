//! Collects run summaries into one tidy CSV per figure family.

use std::fs;
use std::path::{Path, PathBuf};

use distdd_core::flcore::Aggregation;
use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::error::{HarnessError, Result};
use crate::io;
use crate::summary::{ReportResult, Results, RunSummary, SCHEMA, SUMMARY_FILE};

/// Every `summary.json` below `dirs`, sorted by path.
pub fn find_summaries(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))? {
            let path = entry.map_err(|e| HarnessError::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path.file_name().is_some_and(|n| n == SUMMARY_FILE) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for d in dirs {
        walk(d, &mut out)?;
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Parses a summary, rejecting other schema versions before looking at the
/// rest of the document.
pub fn load_summary(path: &Path) -> Result<RunSummary> {
    let value: serde_json::Value = io::read_json(path)?;
    match value.get("schema").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(SCHEMA) => {}
        other => {
            return Err(HarnessError::Schema(format!(
                "{} has schema {:?}, expected {SCHEMA}",
                path.display(),
                other
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| HarnessError::json(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoniidRow {
    pub alpha: f64,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MislabelRow {
    pub rho: f64,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpRow {
    pub noise_multiplier: f64,
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub task: String,
    pub seed: u64,
    /// Grid size.
    pub k: usize,
    pub distdd_bytes: u64,
    pub fedavg_bytes: u64,
    pub distdd_seconds: f64,
    pub fedavg_seconds: f64,
}

#[derive(Default)]
pub struct Tables {
    pub noniid: Vec<NoniidRow>,
    pub mislabel: Vec<MislabelRow>,
    pub dp: Vec<DpRow>,
    pub cost: Vec<CostRow>,
}

impl Tables {
    pub fn add(&mut self, s: &RunSummary) {
        match &s.results {
            Results::Sweep(sw) => {
                for r in &sw.rows {
                    match s.task {
                        Task::SweepNoniid => self.noniid.push(NoniidRow {
                            alpha: r.alpha,
                            seed: r.seed,
                            accuracy: r.accuracy,
                        }),
                        Task::SweepMislabel => self.mislabel.push(MislabelRow {
                            rho: r.rho,
                            aggregation: r.aggregation,
                            seed: r.seed,
                            accuracy: r.accuracy,
                        }),
                        Task::SweepDp => self.dp.push(DpRow {
                            noise_multiplier: r.noise_multiplier.unwrap_or(0.0),
                            epsilon: r.epsilon,
                            seed: r.seed,
                            accuracy: r.accuracy,
                        }),
                        _ => {}
                    }
                }
            }
            Results::Tune(t) => self.cost.push(CostRow {
                task: "tune".into(),
                seed: s.seed,
                k: t.grid.len(),
                distdd_bytes: t.distdd_ledger.total_bytes,
                fedavg_bytes: t.fedavg_ledger.total_bytes,
                distdd_seconds: t.distdd_ledger.modeled_seconds,
                fedavg_seconds: t.fedavg_ledger.modeled_seconds,
            }),
            Results::Nas(n) => self.cost.push(CostRow {
                task: "nas".into(),
                seed: s.seed,
                k: n.candidates.len(),
                distdd_bytes: n.distdd_ledger.total_bytes,
                fedavg_bytes: n.fedavg_ledger.total_bytes,
                distdd_seconds: n.distdd_ledger.modeled_seconds,
                fedavg_seconds: n.fedavg_ledger.modeled_seconds,
            }),
            Results::Distill(_) | Results::Fedavg(_) | Results::Report(_) => {}
        }
    }
}

/// Reads every summary under `inputs` and writes the non-empty tables among
/// `noniid.csv`, `mislabel.csv`, `dp.csv` and `cost_vs_tunes.csv` to `out`.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<ReportResult> {
    let paths = find_summaries(inputs)?;
    let mut tables = Tables::default();
    let mut used = 0;
    for p in &paths {
        let s = load_summary(p)?;
        if s.task == Task::Report {
            continue;
        }
        tables.add(&s);
        used += 1;
    }
    if used == 0 {
        return Err(HarnessError::NoSummaries(
            inputs.first().cloned().unwrap_or_default(),
        ));
    }
    let mut written = Vec::new();
    let mut emit = |name: &str, empty: bool, write: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        if !empty {
            write(&out.join(name))?;
            written.push(name.to_string());
        }
        Ok(())
    };
    emit("noniid.csv", tables.noniid.is_empty(), &|p| io::write_csv(p, &tables.noniid))?;
    emit("mislabel.csv", tables.mislabel.is_empty(), &|p| io::write_csv(p, &tables.mislabel))?;
    emit("dp.csv", tables.dp.is_empty(), &|p| io::write_csv(p, &tables.dp))?;
    emit("cost_vs_tunes.csv", tables.cost.is_empty(), &|p| io::write_csv(p, &tables.cost))?;
    Ok(ReportResult {
        summaries: used,
        tables: written,
    })
}
