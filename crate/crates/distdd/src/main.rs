use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distdd::summary::Results;
use distdd::{report, ExperimentConfig, RunSummary, Task};

#[derive(Parser)]
#[command(name = "distdd", version, about = "Federated dataset distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task named in the config.
    Run(RunArgs),
    /// Run the config as a tuning task.
    Tune(RunArgs),
    /// Run the config as an architecture search.
    Nas(RunArgs),
    /// Collect summaries below the given directories into CSV tables.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

impl RunArgs {
    fn load(&self, task: Option<Task>) -> distdd::Result<ExperimentConfig> {
        let text = std::fs::read_to_string(&self.config).map_err(|e| distdd::HarnessError::io(&self.config, e))?;
        let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| distdd::HarnessError::json(&self.config, e))?;
        if let Some(t) = task {
            cfg.task = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(n) = self.threads {
            cfg.threads = Some(n);
        }
        Ok(cfg)
    }
}

fn headline(s: &RunSummary) -> String {
    match &s.results {
        Results::Distill(r) => format!(
            "synthetic-set accuracy {:.4} (full data {:.4}, ratio {:.4}), {} rows",
            r.accuracy, r.full_data_accuracy, r.relative_accuracy, r.synthetic_rows
        ),
        Results::Fedavg(r) => format!("fedavg accuracy {:.4}", r.accuracy),
        Results::Sweep(r) => r
            .points
            .iter()
            .map(|p| {
                format!(
                    "alpha={} rho={} agg={:?} sigma={:?}: {:.4}",
                    p.alpha, p.rho, p.aggregation, p.noise_multiplier, p.mean_accuracy
                )
            })
            .collect::<Vec<_>>()
            .join("\n"),
        Results::Tune(r) => format!(
            "chosen via synthetic set: {}, via fedavg: {}; bytes {} vs {}",
            r.distdd_choice, r.fedavg_choice, r.distdd_ledger.total_bytes, r.fedavg_ledger.total_bytes
        ),
        Results::Nas(r) => format!(
            "fedavg after synthetic-set search {:.4}, exhaustive fedavg search {:.4}",
            r.fedavg_after_distdd_accuracy, r.fedavg_nas_accuracy
        ),
        Results::Report(r) => format!("{} summaries -> {}", r.summaries, r.tables.join(", ")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => a.load(None).and_then(|c| distdd::run(&c)).map(|s| {
            println!("{}\n{}", s.task.name(), headline(&s));
            println!("wrote {}", s.config.out.display());
        }),
        Command::Tune(a) => a.load(Some(Task::Tune)).and_then(|c| distdd::run(&c)).map(|s| println!("{}", headline(&s))),
        Command::Nas(a) => a.load(Some(Task::Nas)).and_then(|c| distdd::run(&c)).map(|s| println!("{}", headline(&s))),
        Command::Report { dirs, out } => {
            let out = out.unwrap_or_else(|| dirs[0].join("report"));
            report::report(&dirs, &out).map(|r| println!("{} summaries -> {}", r.summaries, r.tables.join(", ")))
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
