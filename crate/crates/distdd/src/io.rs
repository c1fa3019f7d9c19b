//! Files in and out: IDX datasets, JSON, CSV traces and the synthetic set.

use std::fs;
use std::path::{Path, PathBuf};

use distdd_core::data::{self, Dataset};
use distdd_core::distill::{SyntheticDataset, TraceRow};
use distdd_core::numerics::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const SYNTHETIC_BIN: &str = "synthetic.bin";
pub const SYNTHETIC_JSON: &str = "synthetic.json";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

/// Reads an IDX image file and its label file. Pixels come back in `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read(images)?;
    let lab = read(labels)?;
    data::parse_idx(&img, &lab).map_err(|source| HarnessError::Idx {
        path: images.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::json(path, e))?;
    text.push('\n');
    write_file(path, text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::json(path, e))
}

/// Serializes `rows` as a headed CSV table.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::csv(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::io(path, e.into_error()))?;
    write_file(path, bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| HarnessError::csv(path, e))
}

/// One row of `trace.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceCsvRow {
    pub round: usize,
    pub class: usize,
    pub contributors: usize,
    pub uplink_bytes: u64,
    /// `D` before the first inner step; empty when the cell was skipped.
    pub distance: Option<f64>,
    /// `D` after the last inner step.
    pub final_distance: Option<f64>,
    pub inner_steps: usize,
}

impl From<&TraceRow> for TraceCsvRow {
    fn from(r: &TraceRow) -> Self {
        Self {
            round: r.round,
            class: r.class,
            contributors: r.contributors,
            uplink_bytes: r.uplink_bytes,
            distance: r.distance,
            final_distance: r.inner.last().copied(),
            inner_steps: r.grad_sq.len(),
        }
    }
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let rows: Vec<TraceCsvRow> = trace.iter().map(TraceCsvRow::from).collect();
    write_csv(path, &rows)
}

/// Sidecar describing `synthetic.bin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMeta {
    pub rows: usize,
    pub dim: usize,
    pub classes: usize,
    pub ipc: usize,
    /// Always `"f64-le"`.
    pub dtype: String,
    /// Always `"row-major"`; rows are grouped by class.
    pub order: String,
    pub labels: Vec<usize>,
}

/// Writes `synthetic.bin` (little-endian `f64`, row-major) and
/// `synthetic.json` into `dir`; returns both paths.
pub fn write_synthetic(dir: &Path, syn: &SyntheticDataset) -> Result<[PathBuf; 2]> {
    let (x, labels) = syn.to_parts();
    let mut bytes = Vec::with_capacity(x.data().len() * 8);
    for v in x.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let bin = dir.join(SYNTHETIC_BIN);
    write_file(&bin, bytes)?;
    let meta = SyntheticMeta {
        rows: x.rows(),
        dim: x.cols(),
        classes: syn.classes(),
        ipc: syn.ipc(),
        dtype: "f64-le".into(),
        order: "row-major".into(),
        labels,
    };
    let json = dir.join(SYNTHETIC_JSON);
    write_json(&json, &meta)?;
    Ok([bin, json])
}

pub fn read_synthetic(dir: &Path) -> Result<SyntheticDataset> {
    let json = dir.join(SYNTHETIC_JSON);
    let meta: SyntheticMeta = read_json(&json)?;
    let bin = dir.join(SYNTHETIC_BIN);
    let bytes = read(&bin)?;
    if bytes.len() != meta.rows * meta.dim * 8 || meta.rows != meta.classes * meta.ipc {
        return Err(HarnessError::Schema(format!(
            "{} does not match {}",
            bin.display(),
            json.display()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let per = meta.ipc * meta.dim;
    let classes = values
        .chunks_exact(per)
        .map(|c| Tensor::matrix(meta.ipc, meta.dim, c.to_vec()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(SyntheticDataset::new(classes)?)
}
