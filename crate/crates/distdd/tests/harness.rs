use std::fs;
use std::path::{Path, PathBuf};

use distdd::config::{DataSource, ExperimentConfig, Task, TunePoint};
use distdd::error::HarnessError;
use distdd::report;
use distdd::run::{self, DataPool, Job};
use distdd::summary::{Results, RunSummary, SUMMARY_FILE};
use distdd_core::distill;
use distdd_core::error::Error as CoreError;
use distdd_core::flcore::{self, Aggregation};
use distdd_core::models::ModelSpec;
use proptest::prelude::*;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn desk(name: &str, out: &Path) -> ExperimentConfig {
    let text = fs::read_to_string(configs_dir().join("desk").join(name)).unwrap();
    let mut cfg = ExperimentConfig::from_json(&text).unwrap();
    cfg.out = out.to_path_buf();
    cfg.probe.pairs = 50;
    cfg
}

fn all_configs() -> Vec<PathBuf> {
    let mut out = Vec::new();
    for sub in ["desk", "paper"] {
        for e in fs::read_dir(configs_dir().join(sub)).unwrap() {
            out.push(e.unwrap().path());
        }
    }
    out.sort();
    out
}

#[test]
fn shipped_configs_round_trip() {
    let paths = all_configs();
    assert!(paths.len() >= 10);
    for p in paths {
        let cfg = ExperimentConfig::from_json(&fs::read_to_string(&p).unwrap()).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg, "{}", p.display());
    }
}

#[test]
fn desk_configs_validate_and_paper_configs_only_miss_data() {
    for p in all_configs() {
        let cfg = ExperimentConfig::from_json(&fs::read_to_string(&p).unwrap()).unwrap();
        let problems = cfg.problems();
        if p.parent().unwrap().ends_with("desk") {
            assert!(problems.is_empty(), "{}: {problems:?}", p.display());
        } else {
            assert!(matches!(cfg.data, DataSource::Idx { .. }));
            assert!(problems.iter().all(|m| m.starts_with("data.")), "{problems:?}");
        }
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let text = fs::read_to_string(configs_dir().join("desk/distill.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for path in [&[][..], &["distill"][..], &["data"][..], &["federation"][..], &["model"][..]] {
        let mut bad = v.clone();
        let mut node = &mut bad;
        for k in path {
            node = node.get_mut(*k).unwrap();
        }
        node.as_object_mut().unwrap().insert("bogus".into(), 1.into());
        assert!(ExperimentConfig::from_json(&bad.to_string()).is_err(), "{path:?}");
    }
}

#[test]
fn validation_lists_every_bad_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk("distill.json", dir.path());
    cfg.federation.clients = 0;
    cfg.federation.participation = 1.5;
    cfg.distill.syn_lr = -1.0;
    cfg.distill.ipc = 0;
    cfg.alpha = 0.0;
    cfg.eval.batch = 0;
    cfg.threads = Some(0);
    if let DataSource::Blobs { spread, .. } = &mut cfg.data {
        *spread = f64::NAN;
    }
    let problems = cfg.problems();
    for field in [
        "threads",
        "data.spread",
        "alpha",
        "federation.clients",
        "federation.participation",
        "distill.syn_lr",
        "distill.ipc",
        "eval.batch",
    ] {
        assert!(
            problems.iter().any(|p| p.starts_with(&format!("{field}:"))),
            "{field} missing from {problems:?}"
        );
    }
    match run::run(&cfg) {
        Err(HarnessError::Config(list)) => assert_eq!(list, problems),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn tasks_require_their_grids() {
    let dir = tempfile::tempdir().unwrap();
    for (task, field) in [
        (Task::SweepNoniid, "grids.alpha"),
        (Task::SweepMislabel, "grids.rho"),
        (Task::SweepDp, "grids.noise_multiplier"),
        (Task::Tune, "grids.tune"),
        (Task::Nas, "grids.architectures"),
        (Task::Report, "inputs"),
    ] {
        let mut cfg = desk("distill.json", dir.path());
        cfg.task = task;
        assert!(cfg.problems().iter().any(|p| p.starts_with(field)), "{task:?}");
    }
    let mut cfg = desk("sweep-dp.json", dir.path());
    cfg.distill.dp = None;
    assert!(cfg.problems().iter().any(|p| p.starts_with("distill.dp")));
}

#[test]
fn missing_idx_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk("distill.json", dir.path());
    cfg.data = DataSource::Idx {
        train_images: dir.path().join("a"),
        train_labels: dir.path().join("b"),
        test_images: dir.path().join("c"),
        test_labels: dir.path().join("d"),
        train_subset: None,
        test_subset: None,
    };
    assert_eq!(cfg.problems().iter().filter(|p| p.contains("does not exist")).count(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn numeric_fields_round_trip(
        alpha in 1e-6f64..1e6,
        lr in 1e-9f64..10.0,
        part in 0.01f64..1.0,
        seed in any::<u64>(),
        clients in 1usize..100,
        noise in prop::option::of(0.0f64..100.0),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk("sweep-dp.json", dir.path());
        cfg.alpha = alpha;
        cfg.distill.syn_lr = lr;
        cfg.federation.participation = part;
        cfg.federation.clients = clients;
        cfg.seed = seed;
        if let Some(n) = noise {
            cfg.grids.noise_multiplier = vec![n, n / 3.0];
        }
        prop_assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}

/// The summary text with the wall-clock line removed.
fn stable_summary(dir: &Path) -> String {
    fs::read_to_string(dir.join(SUMMARY_FILE))
        .unwrap()
        .lines()
        .filter(|l| !l.trim_start().starts_with("\"wall_clock_seconds\""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn check_artifacts(s: &RunSummary) {
    for a in &s.artifacts {
        assert!(s.config.out.join(a).is_file(), "missing {a}");
    }
}

#[test]
fn distill_run_is_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk("distill.json", dir.path());
    let first = run::run(&cfg).unwrap();
    check_artifacts(&first);
    let snapshot: Vec<(String, Vec<u8>)> = first
        .artifacts
        .iter()
        .map(|a| (a.clone(), fs::read(dir.path().join(a)).unwrap()))
        .collect();
    let text = stable_summary(dir.path());
    let second = run::run(&cfg).unwrap();
    assert_eq!(stable_summary(dir.path()), text);
    for (a, bytes) in snapshot {
        assert_eq!(fs::read(dir.path().join(&a)).unwrap(), bytes, "{a}");
    }
    assert_eq!(second.results, first.results);

    let Results::Distill(r) = &first.results else {
        panic!("wrong result kind")
    };
    assert_eq!(r.synthetic_rows, cfg.distill.ipc * 3);
    let syn = distdd::io::read_synthetic(dir.path()).unwrap();
    assert_eq!((syn.classes(), syn.ipc(), syn.dim()), (3, 10, 2));
    assert!(first.convergence.is_some());
    assert!(first.privacy.is_none());

    let pool = DataPool::open(&cfg.data).unwrap();
    let job = run::distill_job(&cfg, &pool, &Job::from_config(&cfg)).unwrap();
    let params = cfg.model.layout().len();
    let (up, down) = distill::expected_bytes(&job.output.trace, cfg.distill.rounds, cfg.federation.clients, params);
    let totals = first.ledger.unwrap();
    assert_eq!((totals.uplink_bytes, totals.downlink_bytes), (up, down));
    assert_eq!(totals.network_rounds, cfg.distill.rounds);
}

#[test]
fn thread_count_does_not_change_results() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let mut a = desk("sweep-dp.json", d1.path());
    a.grids.repeats = 2;
    a.grids.noise_multiplier = vec![0.01, 10.0];
    a.distill.rounds = 10;
    let mut b = a.clone();
    b.out = d2.path().to_path_buf();
    a.threads = Some(1);
    b.threads = Some(4);
    let (ra, rb) = (run::run(&a).unwrap(), run::run(&b).unwrap());
    assert_eq!(ra.results, rb.results);
    assert_eq!(fs::read(d1.path().join("sweep.csv")).unwrap(), fs::read(d2.path().join("sweep.csv")).unwrap());
}

#[test]
fn sweep_rows_reproduce_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk("sweep-dp.json", dir.path());
    cfg.grids.repeats = 2;
    cfg.grids.noise_multiplier = vec![0.5, 10.0];
    cfg.distill.rounds = 10;
    let s = run::run(&cfg).unwrap();
    let Results::Sweep(sw) = s.results else {
        panic!("wrong result kind")
    };
    assert_eq!(sw.rows.len(), 4);
    let pool = DataPool::open(&cfg.data).unwrap();
    for row in &sw.rows {
        let job = Job {
            seed: row.seed,
            alpha: row.alpha,
            rho: row.rho,
            aggregation: row.aggregation,
            noise_multiplier: row.noise_multiplier,
        };
        let again = run::sweep_row(&cfg, &pool, row.index, &job).unwrap();
        assert_eq!(&again, row);
        assert!(row.epsilon.unwrap() > 0.0);
    }
    assert_ne!(sw.rows[0].accuracy.to_bits(), u64::MAX);
}

#[test]
fn noniid_sweep_accuracy_rises_with_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk("sweep-noniid.json", dir.path());
    assert_eq!(cfg.grids.alpha, vec![0.1, 0.5, 1.0]);
    assert_eq!(cfg.grids.repeats, 5);
    let s = run::run(&cfg).unwrap();
    check_artifacts(&s);
    let Results::Sweep(sw) = s.results else {
        panic!("wrong result kind")
    };
    assert_eq!(sw.points.len(), 3);
    assert_eq!(sw.rows.len(), 15);
    let means: Vec<f64> = sw.points.iter().map(|p| p.mean_accuracy).collect();
    assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
}

#[test]
fn tune_ledgers_follow_grid_size() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk("tune.json", dir.path());
    cfg.distill.rounds = 20;
    cfg.federation.rounds = 20;
    let pool = DataPool::open(&cfg.data).unwrap();
    let grid = cfg.grids.tune.clone();

    cfg.grids.tune = grid[..1].to_vec();
    let one = run::tune(&cfg, &pool, 0).unwrap().result;
    assert_eq!(one.distdd_choice, 0);
    assert_eq!(one.fedavg_choice, 0);
    assert_eq!(one.distdd_post_distill_bytes, 0);

    cfg.grids.tune = grid.clone();
    let all = run::tune(&cfg, &pool, 0).unwrap().result;
    assert_eq!(all.distdd_ledger.total_bytes, one.distdd_ledger.total_bytes);
    assert_eq!(all.fedavg_ledger.total_bytes, grid.len() as u64 * one.fedavg_run_bytes);
    assert_eq!(all.fedavg_run_bytes, one.fedavg_run_bytes);
}

#[test]
fn tune_choice_via_synthetic_set_matches_fedavg_mostly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk("tune.json", dir.path());
    let pool = DataPool::open(&cfg.data).unwrap();
    let agree = (0..5)
        .filter(|&seed| {
            let r = run::tune(&cfg, &pool, seed).unwrap().result;
            r.distdd_choice == r.fedavg_choice
        })
        .count();
    assert!(agree >= 3, "{agree} of 5");
}

#[test]
fn tie_break_is_first_in_grid_order() {
    assert_eq!(run::argmax_first(&[0.5, 0.9, 0.9, 0.1]), 1);
    assert_eq!(run::argmax_first(&[0.7]), 0);
}

#[test]
fn empty_grids_error_at_call_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk("tune.json", dir.path());
    cfg.grids.tune.clear();
    let pool = DataPool::open(&cfg.data).unwrap();
    assert!(matches!(run::tune(&cfg, &pool, 0), Err(HarnessError::EmptyGrid(_))));
    cfg.grids.architectures.clear();
    assert!(matches!(run::nas(&cfg, &pool, 0), Err(HarnessError::EmptyGrid(_))));
}

#[test]
fn nas_single_candidate_and_byte_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk("nas.json", dir.path());
    cfg.distill.rounds = 20;
    cfg.federation.rounds = 20;
    let pool = DataPool::open(&cfg.data).unwrap();
    let grid = cfg.grids.architectures.clone();
    cfg.grids.architectures = grid[..1].to_vec();
    let one = run::nas(&cfg, &pool, 0).unwrap().result;
    assert_eq!((one.distdd_choice, one.fedavg_choice), (0, 0));
    assert_eq!(one.fedavg_after_distdd_accuracy, one.fedavg_nas_accuracy);

    cfg.grids.architectures = grid[..2].to_vec();
    let two = run::nas(&cfg, &pool, 0).unwrap().result;
    assert_eq!(two.distdd_search_bytes, 0);
    assert!(two.distdd_search_bytes < two.fedavg_ledger.total_bytes);
}

#[test]
fn nas_via_synthetic_set_is_close_to_exhaustive_fedavg() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk("nas.json", dir.path());
    let pool = DataPool::open(&cfg.data).unwrap();
    for seed in 0..5 {
        let r = run::nas(&cfg, &pool, seed).unwrap().result;
        let gap = (r.fedavg_after_distdd_accuracy - r.fedavg_nas_accuracy).abs();
        assert!(gap <= 0.03, "seed {seed}: gap {gap}");
    }
}

#[test]
fn fedavg_task_reports_ledger_and_constants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk("fedavg.json", dir.path());
    let s = run::run(&cfg).unwrap();
    check_artifacts(&s);
    let Results::Fedavg(r) = &s.results else {
        panic!("wrong result kind")
    };
    assert!(r.accuracy >= 0.95, "{}", r.accuracy);
    let msg = flcore::message_bytes(cfg.model.layout().len());
    let k = cfg.federation.round_config(0).per_round() as u64;
    let t = s.ledger.unwrap();
    assert_eq!(t.uplink_bytes, cfg.federation.rounds as u64 * k * msg);
    assert_eq!(t.downlink_bytes, t.uplink_bytes);
    assert!(s.convergence.is_some());
}

#[test]
fn runtime_errors_carry_their_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk("distill.json", dir.path());
    cfg.model = ModelSpec::linear(2, 3);
    cfg.distill.syn_lr = 1e300;
    match run::run(&cfg) {
        Err(HarnessError::Core(CoreError::InCell { round, class, .. })) => {
            assert_eq!((round, class), (0, 0));
        }
        other => panic!("expected a cell error, got {other:?}"),
    }
}

#[test]
fn mislabel_rows_record_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk("sweep-mislabel.json", dir.path());
    cfg.grids.rho = vec![0.4];
    cfg.grids.repeats = 1;
    cfg.distill.rounds = 5;
    let s = run::run(&cfg).unwrap();
    let Results::Sweep(sw) = s.results else {
        panic!("wrong result kind")
    };
    let aggs: Vec<Aggregation> = sw.rows.iter().map(|r| r.aggregation).collect();
    assert_eq!(aggs, vec![Aggregation::Mean, Aggregation::Median]);
}

fn small(cfg: &mut ExperimentConfig) {
    cfg.distill.rounds = 5;
    cfg.federation.rounds = 5;
    cfg.grids.repeats = 2;
}

#[test]
fn report_collects_tables() {
    let root = tempfile::tempdir().unwrap();
    let runs = root.path().join("runs");
    let mut a = desk("sweep-noniid.json", &runs.join("noniid"));
    small(&mut a);
    let mut b = desk("sweep-dp.json", &runs.join("dp"));
    small(&mut b);
    let mut c = desk("tune.json", &runs.join("tune"));
    small(&mut c);
    for cfg in [&a, &b, &c] {
        run::run(cfg).unwrap();
    }
    let out = root.path().join("report");
    let r = report::report(std::slice::from_ref(&runs), &out).unwrap();
    assert_eq!(r.summaries, 3);
    assert_eq!(r.tables, vec!["noniid.csv", "dp.csv", "cost_vs_tunes.csv"]);
    let noniid: Vec<report::NoniidRow> = distdd::io::read_csv(&out.join("noniid.csv")).unwrap();
    assert_eq!(noniid.len(), 6);
    let cost: Vec<report::CostRow> = distdd::io::read_csv(&out.join("cost_vs_tunes.csv")).unwrap();
    assert_eq!(cost.len(), 1);
    assert_eq!(cost[0].k, c.grids.tune.len());

    let mut cfg = desk("distill.json", &root.path().join("rep"));
    cfg.task = Task::Report;
    cfg.inputs = vec![runs.clone()];
    let s = run::run(&cfg).unwrap();
    check_artifacts(&s);

    let path = runs.join("dp").join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).unwrap().replacen("\"schema\": 1", "\"schema\": 2", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(report::report(&[runs], &out), Err(HarnessError::Schema(_))));
}

#[test]
fn report_without_summaries_fails() {
    let dir = tempfile::tempdir().unwrap();
    let err = report::report(&[dir.path().to_path_buf()], &dir.path().join("o")).unwrap_err();
    assert!(matches!(err, HarnessError::NoSummaries(_)));
}

#[test]
fn tune_point_serializes_plainly() {
    let p = TunePoint {
        lr: 0.5,
        batch: 8,
        local_steps: 1,
    };
    assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"lr":0.5,"batch":8,"local_steps":1}"#);
}

#[test]
fn cli_runs_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_distdd");
    let cfg_path = configs_dir().join("desk/distill.json");
    let out = dir.path().join("cli");
    let status = std::process::Command::new(exe)
        .args(["run", cfg_path.to_str().unwrap(), "--seed", "7", "--threads", "2", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let s: RunSummary = distdd::io::read_json(&out.join(SUMMARY_FILE)).unwrap();
    assert_eq!((s.seed, s.config.threads), (7, Some(2)));

    let rep = dir.path().join("rep");
    let status = std::process::Command::new(exe)
        .args(["report", dir.path().to_str().unwrap(), "--out"])
        .arg(&rep)
        .output()
        .unwrap();
    // A lone distill summary feeds no table, which is fine.
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    let bad = std::process::Command::new(exe)
        .args(["run", dir.path().join("missing.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("missing.json"));
}
