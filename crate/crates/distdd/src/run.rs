//! Task orchestration. Every random choice is derived from the run seed, and
//! parallel jobs are merged by grid index, so a run is a pure function of
//! its config.

use std::path::Path;
use std::time::Instant;

use distdd_core::data::{self, Dataset, Partition};
use distdd_core::distill::{self, DistillConfig, DistillOutput, SyntheticDataset};
use distdd_core::flcore::{self, Aggregation, CostLedger};
use distdd_core::models::{self, ModelSpec, ParamSet, TrainConfig};
use distdd_core::rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, Task, TunePoint};
use crate::convergence;
use crate::error::{HarnessError, Result};
use crate::io;
use crate::report;
use crate::summary::*;

/// Train/test pair for one run seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub train: Dataset,
    pub test: Dataset,
}

/// An opened data source that can hand out per-seed instances.
#[derive(Clone, Debug)]
pub enum DataPool {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        test_per_class: usize,
    },
    Files {
        train: Dataset,
        test: Dataset,
        train_subset: Option<usize>,
        test_subset: Option<usize>,
    },
}

fn draw_subset(ds: &Dataset, n: Option<usize>, seed: u64, tag: u64) -> Dataset {
    match n {
        Some(n) if n < ds.len() => {
            let mut r = rng::stream(seed, &[rng::EVAL, tag]);
            ds.subset(&rng::sample_indices(&mut r, ds.len(), n))
        }
        _ => ds.clone(),
    }
}

impl DataPool {
    pub fn open(src: &DataSource) -> Result<Self> {
        Ok(match src {
            &DataSource::Blobs {
                classes,
                per_class,
                dim,
                spread,
                test_per_class,
            } => DataPool::Blobs {
                classes,
                per_class,
                dim,
                spread,
                test_per_class,
            },
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_subset,
                test_subset,
            } => DataPool::Files {
                train: io::load_idx(train_images, train_labels)?,
                test: io::load_idx(test_images, test_labels)?,
                train_subset: *train_subset,
                test_subset: *test_subset,
            },
        })
    }

    pub fn instance(&self, seed: u64) -> Result<Instance> {
        Ok(match self {
            &DataPool::Blobs {
                classes,
                per_class,
                dim,
                spread,
                test_per_class,
            } => Instance {
                train: data::gen_blobs(classes, per_class, dim, spread, seed)?,
                test: data::gen_blobs(classes, test_per_class, dim, spread, rng::derive(seed, &[rng::EVAL, 2]))?,
            },
            DataPool::Files {
                train,
                test,
                train_subset,
                test_subset,
            } => Instance {
                train: draw_subset(train, *train_subset, seed, 5),
                test: draw_subset(test, *test_subset, seed, 6),
            },
        })
    }
}

/// Settings that vary between sweep jobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Job {
    pub seed: u64,
    pub alpha: f64,
    pub rho: f64,
    pub aggregation: Aggregation,
    /// Replaces the base DP noise multiplier when set.
    pub noise_multiplier: Option<f64>,
}

impl Job {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            seed: cfg.seed,
            alpha: cfg.alpha,
            rho: cfg.mislabel.rho,
            aggregation: cfg.distill.aggregation,
            noise_multiplier: None,
        }
    }

    pub fn distill_config(&self, base: &DistillConfig) -> DistillConfig {
        let mut d = base.clone();
        d.aggregation = self.aggregation;
        if let (Some(dp), Some(s)) = (d.dp.as_mut(), self.noise_multiplier) {
            dp.noise_multiplier = s;
        }
        d
    }
}

pub struct JobOutput {
    pub instance: Instance,
    pub partition: Partition,
    pub bad_clients: Vec<usize>,
    pub distill: DistillConfig,
    pub output: DistillOutput,
    /// Test accuracy of a fresh model trained on the synthetic set.
    pub accuracy: f64,
}

/// Partition, corrupt, distill and score one job.
pub fn distill_job(cfg: &ExperimentConfig, pool: &DataPool, job: &Job) -> Result<JobOutput> {
    let instance = pool.instance(job.seed)?;
    let partition = data::partition_dirichlet(&instance.train, cfg.federation.clients, job.alpha, job.seed)?;
    let mis = data::inject_mislabels(&instance.train, job.rho, &partition, cfg.mislabel.sample_rate, job.seed)?;
    let dcfg = job.distill_config(&cfg.distill);
    let rc = cfg.federation.round_config(job.seed);
    let output = distill::distill(&mis.dataset, &partition, &cfg.model, &rc, &dcfg)?;
    let accuracy = distill::evaluate_synthetic(&cfg.model, &output.synthetic, &cfg.eval, job.seed, &instance.test)?;
    Ok(JobOutput {
        instance,
        partition,
        bad_clients: mis.bad_clients,
        distill: dcfg,
        output,
        accuracy,
    })
}

/// The evaluation training run on the whole (clean) training set.
pub fn full_data_accuracy(spec: &ModelSpec, eval: &TrainConfig, inst: &Instance, seed: u64) -> Result<f64> {
    let init = models::init_params(spec, rng::derive(seed, &[rng::EVAL, 3]))?;
    let mut r = rng::stream(seed, &[rng::EVAL, 4]);
    let trained = models::train(spec, &init, inst.train.features(), inst.train.labels(), eval, &mut r)?;
    Ok(models::accuracy(spec, &trained, inst.test.features(), inst.test.labels())?)
}

/// Trains `spec` from `init` on the synthetic set and scores it on `ds`.
fn train_on_synthetic(
    spec: &ModelSpec,
    init: &ParamSet,
    syn: &SyntheticDataset,
    train: &TrainConfig,
    r: &mut rng::Rng,
    ds: &Dataset,
) -> Result<f64> {
    let (x, y) = syn.to_parts();
    let trained = models::train(spec, init, &x, &y, train, r)?;
    Ok(models::accuracy(spec, &trained, ds.features(), ds.labels())?)
}

/// First index of the maximum; ties go to the earlier grid point.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// What an artifact-writing task hands back besides its results.
#[derive(Default)]
struct Extras {
    artifacts: Vec<String>,
    ledger: Option<LedgerTotals>,
    privacy: Option<PrivacyReport>,
    convergence: Option<Convergence>,
}

impl Extras {
    fn add(&mut self, name: &str) {
        self.artifacts.push(name.into());
    }

    fn csv<T: Serialize>(&mut self, out: &Path, name: &str, rows: &[T]) -> Result<()> {
        io::write_csv(&out.join(name), rows)?;
        self.add(name);
        Ok(())
    }

    fn ledger_csv(&mut self, cfg: &ExperimentConfig, name: &str, ledger: &CostLedger) -> Result<()> {
        io::write_file(&cfg.out.join(name), ledger.to_csv(&cfg.cost))?;
        self.add(name);
        Ok(())
    }

    fn synthetic(&mut self, out: &Path, syn: &SyntheticDataset) -> Result<()> {
        io::write_synthetic(out, syn)?;
        self.add(io::SYNTHETIC_BIN);
        self.add(io::SYNTHETIC_JSON);
        Ok(())
    }
}

/// Validates `cfg`, runs its task in a pool of `cfg.threads` workers and
/// writes `summary.json` plus the task's artifacts under `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.out).map_err(|e| HarnessError::io(&cfg.out, e))?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let (results, extras) = builder.build()?.install(|| execute(cfg))?;
    let summary = RunSummary {
        schema: SCHEMA,
        task: cfg.task,
        seed: cfg.seed,
        config: cfg.clone(),
        results,
        artifacts: extras.artifacts,
        ledger: extras.ledger,
        privacy: extras.privacy,
        convergence: extras.convergence,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    io::write_json(&cfg.out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn execute(cfg: &ExperimentConfig) -> Result<(Results, Extras)> {
    if cfg.task == Task::Report {
        let mut extras = Extras::default();
        let res = report::report(&cfg.inputs, &cfg.out)?;
        extras.artifacts = res.tables.clone();
        return Ok((Results::Report(res), extras));
    }
    let pool = DataPool::open(&cfg.data)?;
    match cfg.task {
        Task::Distill => run_distill(cfg, &pool),
        Task::Fedavg => run_fedavg(cfg, &pool),
        Task::SweepNoniid | Task::SweepMislabel | Task::SweepDp => run_sweep(cfg, &pool),
        Task::Tune => run_tune(cfg, &pool),
        Task::Nas => run_nas(cfg, &pool),
        Task::Report => unreachable!("handled above"),
    }
}

fn run_distill(cfg: &ExperimentConfig, pool: &DataPool) -> Result<(Results, Extras)> {
    let job = Job::from_config(cfg);
    let out = distill_job(cfg, pool, &job)?;
    let full = full_data_accuracy(&cfg.model, &cfg.eval, &out.instance, cfg.seed)?;
    let conv = convergence::distill_convergence(
        &cfg.model,
        &out.instance.train,
        &out.distill,
        &cfg.probe,
        cfg.seed,
        &out.output,
    )?;
    let mut ex = Extras::default();
    io::write_trace(&cfg.out.join("trace.csv"), &out.output.trace)?;
    ex.add("trace.csv");
    ex.ledger_csv(cfg, "ledger.csv", &out.output.ledger)?;
    ex.synthetic(&cfg.out, &out.output.synthetic)?;
    ex.ledger = Some(LedgerTotals::of(&out.output.ledger, &cfg.cost));
    ex.privacy = out.distill.dp.as_ref().map(PrivacyReport::of);
    ex.convergence = Some(Convergence::Distill(conv));
    let syn = &out.output.synthetic;
    let res = DistillResult {
        accuracy: out.accuracy,
        full_data_accuracy: full,
        relative_accuracy: out.accuracy / full,
        synthetic_rows: syn.classes() * syn.ipc(),
        skipped_cells: out.output.skipped().count(),
        bad_clients: out.bad_clients,
    };
    Ok((Results::Distill(res), ex))
}

/// A FedAvg run on `shards` from a seeded initialization.
pub struct FedavgRun {
    pub init: ParamSet,
    pub theta: ParamSet,
    pub ledger: CostLedger,
}

pub fn fedavg_run(
    spec: &ModelSpec,
    shards: &[Dataset],
    rc: &flcore::RoundConfig,
    init_seed: u64,
    phase: &str,
) -> Result<FedavgRun> {
    let init = models::init_params(spec, init_seed)?;
    let mut ledger = CostLedger::new();
    let theta = flcore::fedavg(spec, &init, shards, rc, &mut ledger, phase)?;
    Ok(FedavgRun { init, theta, ledger })
}

fn run_fedavg(cfg: &ExperimentConfig, pool: &DataPool) -> Result<(Results, Extras)> {
    let inst = pool.instance(cfg.seed)?;
    let partition = data::partition_dirichlet(&inst.train, cfg.federation.clients, cfg.alpha, cfg.seed)?;
    let mis = data::inject_mislabels(&inst.train, cfg.mislabel.rho, &partition, cfg.mislabel.sample_rate, cfg.seed)?;
    let shards = partition.client_datasets(&mis.dataset);
    let rc = cfg.federation.round_config(cfg.seed);
    let run = fedavg_run(&cfg.model, &shards, &rc, cfg.seed, "fedavg")?;
    let accuracy = models::accuracy(&cfg.model, &run.theta, inst.test.features(), inst.test.labels())?;
    let conv = convergence::fedavg_convergence(&cfg.model, &mis.dataset, &shards, &rc, &run.init, &run.theta)?;
    let mut ex = Extras::default();
    ex.ledger_csv(cfg, "ledger.csv", &run.ledger)?;
    ex.ledger = Some(LedgerTotals::of(&run.ledger, &cfg.cost));
    ex.convergence = Some(Convergence::Fedavg(conv));
    Ok((Results::Fedavg(FedavgResult { accuracy }), ex))
}

/// Jobs of a sweep task in grid order, `repeats` consecutive seeds each.
pub fn sweep_jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let base = Job::from_config(cfg);
    let g = &cfg.grids;
    let points: Vec<Job> = match cfg.task {
        Task::SweepNoniid => g.alpha.iter().map(|&alpha| Job { alpha, ..base }).collect(),
        Task::SweepMislabel => g
            .rho
            .iter()
            .flat_map(|&rho| g.aggregations.iter().map(move |&aggregation| Job { rho, aggregation, ..base }))
            .collect(),
        Task::SweepDp => g
            .noise_multiplier
            .iter()
            .map(|&s| Job {
                noise_multiplier: Some(s),
                ..base
            })
            .collect(),
        _ => vec![base],
    };
    points
        .into_iter()
        .flat_map(|p| {
            (0..g.repeats as u64).map(move |r| Job {
                seed: p.seed.wrapping_add(r),
                ..p
            })
        })
        .collect()
}

pub fn sweep_row(cfg: &ExperimentConfig, pool: &DataPool, index: usize, job: &Job) -> Result<SweepRow> {
    let out = distill_job(cfg, pool, job)?;
    Ok(SweepRow {
        index,
        seed: job.seed,
        alpha: job.alpha,
        rho: job.rho,
        aggregation: job.aggregation,
        noise_multiplier: out.distill.dp.as_ref().map(|d| d.noise_multiplier),
        epsilon: out.distill.dp.as_ref().and_then(|d| d.epsilon().ok()),
        accuracy: out.accuracy,
        uplink_bytes: out.output.ledger.uplink_bytes(),
        downlink_bytes: out.output.ledger.downlink_bytes(),
    })
}

fn run_sweep(cfg: &ExperimentConfig, pool: &DataPool) -> Result<(Results, Extras)> {
    let jobs = sweep_jobs(cfg);
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, j)| sweep_row(cfg, pool, i, j))
        .collect::<Result<_>>()?;
    let points = rows
        .chunks(cfg.grids.repeats)
        .map(|c| SweepPoint {
            alpha: c[0].alpha,
            rho: c[0].rho,
            aggregation: c[0].aggregation,
            noise_multiplier: c[0].noise_multiplier,
            runs: c.len(),
            mean_accuracy: c.iter().map(|r| r.accuracy).sum::<f64>() / c.len() as f64,
        })
        .collect();
    let mut ex = Extras::default();
    ex.csv(&cfg.out, "sweep.csv", &rows)?;
    if cfg.task == Task::SweepDp {
        ex.privacy = cfg.distill.dp.as_ref().map(PrivacyReport::of);
    }
    Ok((Results::Sweep(SweepResult { rows, points }), ex))
}

/// Validation split, partition of the fitting part and one distillation,
/// shared by tuning and architecture search.
pub struct SearchBase {
    pub instance: Instance,
    pub fit: Dataset,
    pub validation: Dataset,
    pub shards: Vec<Dataset>,
    pub output: DistillOutput,
}

/// Fraction of the training set held out for validation in tune and nas.
pub const VALIDATION_FRACTION: f64 = 0.2;

pub fn search_base(cfg: &ExperimentConfig, pool: &DataPool, seed: u64) -> Result<SearchBase> {
    let instance = pool.instance(seed)?;
    let (fit, validation) = instance.train.split(VALIDATION_FRACTION, rng::derive(seed, &[rng::EVAL, 7]));
    let partition = data::partition_dirichlet(&fit, cfg.federation.clients, cfg.alpha, seed)?;
    let rc = cfg.federation.round_config(seed);
    let output = distill::distill(&fit, &partition, &cfg.model, &rc, &cfg.distill)?;
    Ok(SearchBase {
        shards: partition.client_datasets(&fit),
        instance,
        fit,
        validation,
        output,
    })
}

pub struct TuneOutcome {
    pub result: TuneResult,
    pub distdd_ledger: CostLedger,
    pub fedavg_ledger: CostLedger,
}

/// Scores every grid point twice: by training on the synthetic set, which
/// costs only local compute, and by a full FedAvg run per point.
pub fn tune(cfg: &ExperimentConfig, pool: &DataPool, seed: u64) -> Result<TuneOutcome> {
    let grid = &cfg.grids.tune;
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid("tune"));
    }
    let base = search_base(cfg, pool, seed)?;
    let init_seed = rng::derive(seed, &[rng::EVAL, 8]);
    let init = models::init_params(&cfg.model, init_seed)?;
    let steps = |p: &TunePoint| cfg.federation.rounds * p.local_steps;
    let scored: Vec<(f64, f64, CostLedger)> = grid
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let train = TrainConfig {
                steps: steps(p),
                lr: p.lr,
                batch: p.batch,
            };
            let mut r = rng::stream(seed, &[rng::EVAL, 9, i as u64]);
            let on_s = train_on_synthetic(&cfg.model, &init, &base.output.synthetic, &train, &mut r, &base.validation)?;
            let mut rc = cfg.federation.round_config(seed);
            rc.client_lr = p.lr;
            rc.batch_size = p.batch;
            rc.local_steps = p.local_steps;
            let run = fedavg_run(&cfg.model, &base.shards, &rc, init_seed, &format!("fedavg-{i}"))?;
            let val = models::accuracy(&cfg.model, &run.theta, base.validation.features(), base.validation.labels())?;
            Ok((on_s, val, run.ledger))
        })
        .collect::<Result<_>>()?;
    let mut distdd_ledger = base.output.ledger.clone();
    for (i, p) in grid.iter().enumerate() {
        distdd_ledger.record_compute(i, "tune", 0, steps(p) as u64);
    }
    let mut fedavg_ledger = CostLedger::new();
    for (_, _, l) in &scored {
        fedavg_ledger.extend(l);
    }
    let distdd_validation: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let fedavg_validation: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let result = TuneResult {
        grid: grid.clone(),
        distdd_choice: argmax_first(&distdd_validation),
        fedavg_choice: argmax_first(&fedavg_validation),
        distdd_validation,
        fedavg_validation,
        distdd_ledger: LedgerTotals::of(&distdd_ledger, &cfg.cost),
        distdd_post_distill_bytes: distdd_ledger.total_bytes() - base.output.ledger.total_bytes(),
        fedavg_ledger: LedgerTotals::of(&fedavg_ledger, &cfg.cost),
        fedavg_run_bytes: scored[0].2.total_bytes(),
    };
    Ok(TuneOutcome {
        result,
        distdd_ledger,
        fedavg_ledger,
    })
}

#[derive(Serialize)]
struct GridCsvRow {
    index: usize,
    candidate: String,
    distdd_validation: f64,
    fedavg_validation: f64,
}

fn run_tune(cfg: &ExperimentConfig, pool: &DataPool) -> Result<(Results, Extras)> {
    let out = tune(cfg, pool, cfg.seed)?;
    let r = &out.result;
    let rows: Vec<GridCsvRow> = r
        .grid
        .iter()
        .enumerate()
        .map(|(i, p)| GridCsvRow {
            index: i,
            candidate: format!("lr={} batch={} local_steps={}", p.lr, p.batch, p.local_steps),
            distdd_validation: r.distdd_validation[i],
            fedavg_validation: r.fedavg_validation[i],
        })
        .collect();
    let mut ex = Extras::default();
    ex.csv(&cfg.out, "tune.csv", &rows)?;
    ex.ledger_csv(cfg, "ledger_distdd.csv", &out.distdd_ledger)?;
    ex.ledger_csv(cfg, "ledger_fedavg.csv", &out.fedavg_ledger)?;
    ex.ledger = Some(r.distdd_ledger);
    Ok((Results::Tune(out.result), ex))
}

pub struct NasOutcome {
    pub result: NasResult,
    pub distdd_ledger: CostLedger,
    pub fedavg_ledger: CostLedger,
}

/// Picks an architecture by training each candidate on the synthetic set,
/// then retrains the winner with FedAvg; the exhaustive path runs FedAvg
/// for every candidate.
pub fn nas(cfg: &ExperimentConfig, pool: &DataPool, seed: u64) -> Result<NasOutcome> {
    let grid = &cfg.grids.architectures;
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid("architectures"));
    }
    let base = search_base(cfg, pool, seed)?;
    let rc = cfg.federation.round_config(seed);
    let test = &base.instance.test;
    let scored: Vec<(f64, f64, f64, CostLedger)> = grid
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let init_seed = rng::derive(seed, &[rng::EVAL, 10, i as u64]);
            let init = models::init_params(spec, init_seed)?;
            let mut r = rng::stream(seed, &[rng::EVAL, 11, i as u64]);
            let on_s = train_on_synthetic(spec, &init, &base.output.synthetic, &cfg.eval, &mut r, &base.validation)?;
            let run = fedavg_run(spec, &base.shards, &rc, init_seed, &format!("fedavg-{i}"))?;
            let val = models::accuracy(spec, &run.theta, base.validation.features(), base.validation.labels())?;
            let acc = models::accuracy(spec, &run.theta, test.features(), test.labels())?;
            Ok((on_s, val, acc, run.ledger))
        })
        .collect::<Result<_>>()?;
    let distdd_validation: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let fedavg_validation: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let (dc, fc) = (argmax_first(&distdd_validation), argmax_first(&fedavg_validation));
    let mut distdd_ledger = base.output.ledger.clone();
    for i in 0..grid.len() {
        distdd_ledger.record_compute(i, "search", 0, cfg.eval.steps as u64);
    }
    let search_bytes = distdd_ledger.total_bytes() - base.output.ledger.total_bytes();
    // Retraining the winner is the same seeded FedAvg run as its exhaustive
    // counterpart, so its ledger is reused.
    distdd_ledger.extend(&scored[dc].3);
    let mut fedavg_ledger = CostLedger::new();
    for s in &scored {
        fedavg_ledger.extend(&s.3);
    }
    let result = NasResult {
        candidates: grid.clone(),
        distdd_choice: dc,
        fedavg_choice: fc,
        fedavg_after_distdd_accuracy: scored[dc].2,
        fedavg_nas_accuracy: scored[fc].2,
        distdd_search_bytes: search_bytes,
        distdd_validation,
        fedavg_validation,
        distdd_ledger: LedgerTotals::of(&distdd_ledger, &cfg.cost),
        fedavg_ledger: LedgerTotals::of(&fedavg_ledger, &cfg.cost),
    };
    Ok(NasOutcome {
        result,
        distdd_ledger,
        fedavg_ledger,
    })
}

fn describe(spec: &ModelSpec) -> String {
    format!("{:?} hidden={:?} {:?}", spec.arch, spec.hidden, spec.activation).to_lowercase()
}

fn run_nas(cfg: &ExperimentConfig, pool: &DataPool) -> Result<(Results, Extras)> {
    let out = nas(cfg, pool, cfg.seed)?;
    let r = &out.result;
    let rows: Vec<GridCsvRow> = r
        .candidates
        .iter()
        .enumerate()
        .map(|(i, s)| GridCsvRow {
            index: i,
            candidate: describe(s),
            distdd_validation: r.distdd_validation[i],
            fedavg_validation: r.fedavg_validation[i],
        })
        .collect();
    let mut ex = Extras::default();
    ex.csv(&cfg.out, "nas.csv", &rows)?;
    ex.ledger_csv(cfg, "ledger_distdd.csv", &out.distdd_ledger)?;
    ex.ledger_csv(cfg, "ledger_fedavg.csv", &out.fedavg_ledger)?;
    ex.ledger = Some(r.distdd_ledger);
    Ok((Results::Nas(out.result), ex))
}
