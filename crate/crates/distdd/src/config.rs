//! Experiment configuration: a JSON document with unknown keys rejected.

use std::path::{Path, PathBuf};

use distdd_core::distill::DistillConfig;
use distdd_core::flcore::{Aggregation, CostModel, RoundConfig};
use distdd_core::models::{ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Distill,
    Fedavg,
    SweepNoniid,
    SweepMislabel,
    SweepDp,
    Tune,
    Nas,
    Report,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Distill => "distill",
            Task::Fedavg => "fedavg",
            Task::SweepNoniid => "sweep-noniid",
            Task::SweepMislabel => "sweep-mislabel",
            Task::SweepDp => "sweep-dp",
            Task::Tune => "tune",
            Task::Nas => "nas",
            Task::Report => "report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian clusters; a fresh train and test draw per run seed.
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        test_per_class: usize,
    },
    /// IDX image/label file pairs (MNIST, FashionMNIST). Optional subsets
    /// are drawn per run seed.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
}

/// Client population and FedAvg settings; the seed comes from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub participation: f64,
    /// FedAvg rounds. Distillation uses `distill.rounds`.
    pub rounds: usize,
    pub local_steps: usize,
    pub client_lr: f64,
    pub batch_size: usize,
}

impl FederationConfig {
    pub fn round_config(&self, seed: u64) -> RoundConfig {
        RoundConfig {
            clients: self.clients,
            participation: self.participation,
            rounds: self.rounds,
            local_steps: self.local_steps,
            client_lr: self.client_lr,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MislabelConfig {
    /// Fraction of clients whose labels are corrupted.
    pub rho: f64,
    /// Fraction of each corrupted client's samples that get a wrong label.
    pub sample_rate: f64,
}

impl Default for MislabelConfig {
    fn default() -> Self {
        Self {
            rho: 0.0,
            sample_rate: 1.0,
        }
    }
}

/// One FL-process hyperparameter setting. FedAvg uses it directly; training
/// on the synthetic set uses `lr`, `batch` and `rounds · local_steps` steps so
/// both paths get the same number of SGD steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunePoint {
    pub lr: f64,
    pub batch: usize,
    pub local_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    pub alpha: Vec<f64>,
    pub rho: Vec<f64>,
    pub aggregations: Vec<Aggregation>,
    pub noise_multiplier: Vec<f64>,
    pub tune: Vec<TunePoint>,
    pub architectures: Vec<ModelSpec>,
    /// Seeds per grid point: `seed, seed + 1, …`.
    pub repeats: usize,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            alpha: Vec::new(),
            rho: Vec::new(),
            aggregations: vec![Aggregation::Mean, Aggregation::Median],
            noise_multiplier: Vec::new(),
            tune: Vec::new(),
            architectures: Vec::new(),
            repeats: 1,
        }
    }
}

/// Smoothness probing for the convergence section of the summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub pairs: usize,
    pub radius: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pairs: 1000,
            radius: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    pub data: DataSource,
    pub model: ModelSpec,
    /// Dirichlet concentration for the client partition.
    pub alpha: f64,
    pub federation: FederationConfig,
    pub distill: DistillConfig,
    /// Training used to score a synthetic set or the full-data baseline.
    pub eval: TrainConfig,
    #[serde(default)]
    pub mislabel: MislabelConfig,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Directories scanned for `summary.json` by the report task.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn positive_finite(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| HarnessError::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(p))
        }
    }

    /// Every violated constraint as `field: reason`.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |field: &str, reason: &str| out.push(format!("{field}: {reason}"));

        if self.threads == Some(0) {
            push("threads", "must be positive");
        }
        match &self.data {
            DataSource::Blobs {
                classes,
                per_class,
                dim,
                spread,
                test_per_class,
            } => {
                if *classes < 2 {
                    push("data.classes", "need at least 2");
                }
                if *per_class == 0 {
                    push("data.per_class", "must be positive");
                }
                if *test_per_class == 0 {
                    push("data.test_per_class", "must be positive");
                }
                if *dim < 2 {
                    push("data.dim", "need at least 2");
                }
                if !(spread.is_finite() && *spread >= 0.0) {
                    push("data.spread", "must be finite and non-negative");
                }
                if self.model.classes != *classes {
                    push("model.classes", "must equal data.classes");
                }
                if self.model.input_dim != *dim {
                    push("model.input_dim", "must equal data.dim");
                }
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_subset,
                test_subset,
            } => {
                for (name, path) in [
                    ("data.train_images", train_images),
                    ("data.train_labels", train_labels),
                    ("data.test_images", test_images),
                    ("data.test_labels", test_labels),
                ] {
                    if !path.is_file() {
                        out.push(format!("{name}: file {} does not exist", path.display()));
                    }
                }
                if *train_subset == Some(0) || *test_subset == Some(0) {
                    out.push("data: subsets must be positive".into());
                }
            }
        }
        let mut push = |field: &str, reason: &str| out.push(format!("{field}: {reason}"));
        if let Err(e) = self.model.validate() {
            push("model", &e.to_string());
        }
        if !positive_finite(self.alpha) {
            push("alpha", "must be positive and finite");
        }
        for (f, r) in self.federation.round_config(self.seed).problems() {
            push(&format!("federation.{f}"), r);
        }
        for (f, r) in self.distill.problems() {
            push(&format!("distill.{f}"), r);
        }
        if self.eval.steps == 0 {
            push("eval.steps", "must be positive");
        }
        if !positive_finite(self.eval.lr) {
            push("eval.lr", "must be positive and finite");
        }
        if self.eval.batch == 0 {
            push("eval.batch", "must be positive");
        }
        if !unit(self.mislabel.rho) {
            push("mislabel.rho", "must lie in [0, 1]");
        }
        if !unit(self.mislabel.sample_rate) {
            push("mislabel.sample_rate", "must lie in [0, 1]");
        }
        if let Err(e) = self.cost.validate() {
            push("cost", &e.to_string());
        }
        if self.probe.pairs == 0 {
            push("probe.pairs", "must be positive");
        }
        if !positive_finite(self.probe.radius) {
            push("probe.radius", "must be positive and finite");
        }
        let g = &self.grids;
        if g.repeats == 0 {
            push("grids.repeats", "must be positive");
        }
        match self.task {
            Task::SweepNoniid => {
                if g.alpha.is_empty() {
                    push("grids.alpha", "must be non-empty for sweep-noniid");
                }
                if g.alpha.iter().any(|&a| !positive_finite(a)) {
                    push("grids.alpha", "entries must be positive and finite");
                }
            }
            Task::SweepMislabel => {
                if g.rho.is_empty() {
                    push("grids.rho", "must be non-empty for sweep-mislabel");
                }
                if g.rho.iter().any(|&r| !unit(r)) {
                    push("grids.rho", "entries must lie in [0, 1]");
                }
                if g.aggregations.is_empty() {
                    push("grids.aggregations", "must be non-empty for sweep-mislabel");
                }
            }
            Task::SweepDp => {
                if g.noise_multiplier.is_empty() {
                    push("grids.noise_multiplier", "must be non-empty for sweep-dp");
                }
                if g.noise_multiplier.iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
                    push("grids.noise_multiplier", "entries must be non-negative and finite");
                }
                if self.distill.dp.is_none() {
                    push("distill.dp", "sweep-dp needs a base clip and delta");
                }
            }
            Task::Tune => {
                if g.tune.is_empty() {
                    push("grids.tune", "must be non-empty for tune");
                }
                for (i, t) in g.tune.iter().enumerate() {
                    if !positive_finite(t.lr) || t.batch == 0 || t.local_steps == 0 {
                        push(&format!("grids.tune[{i}]"), "lr, batch and local_steps must be positive");
                    }
                }
            }
            Task::Nas => {
                if g.architectures.is_empty() {
                    push("grids.architectures", "must be non-empty for nas");
                }
                for (i, a) in g.architectures.iter().enumerate() {
                    if let Err(e) = a.validate() {
                        push(&format!("grids.architectures[{i}]"), &e.to_string());
                    }
                    if a.input_dim != self.model.input_dim || a.classes != self.model.classes {
                        push(
                            &format!("grids.architectures[{i}]"),
                            "input_dim and classes must match the model",
                        );
                    }
                }
            }
            Task::Report => {
                if self.inputs.is_empty() {
                    push("inputs", "must list at least one directory for report");
                }
            }
            Task::Distill | Task::Fedavg => {}
        }
        out
    }
}
