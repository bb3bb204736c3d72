use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ciga::graphdata::{load_dataset, save_dataset};
use ciga::harness::{plot_curves, score, ExperimentConfig, RunMetrics, RunReport, RunResult, RunStatus};
use ciga::model::Checkpoint;
use ciga::par::Execution;
use ciga::scmgen::{gen_dataset, GenConfig, ShiftMode};
use ciga::trainer::{train, RunConfig};
use ciga::Error;

const CHECKPOINT_FILE: &str = "checkpoint.json";
const LOG_FILE: &str = "log.csv";
const RECORD_FILE: &str = "record.json";

#[derive(Parser)]
#[command(name = "ciga", version, about = "Invariant graph learning on synthetic motif benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a train/val/test dataset file.
    Gen(GenArgs),
    /// Train one model; writes checkpoint, per-epoch log, and run record into DIR.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split of a dataset; prints JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Collect every run record below DIR into a report (`.json` and `.csv`).
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot a metric against bias from one or more reports.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "test_acc")]
        metric: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, default_value = "struc")]
    mode: String,
    #[arg(long, default_value_t = 0.9)]
    bias: f64,
    #[arg(long, default_value_t = 500)]
    train_per_class: usize,
    #[arg(long, default_value_t = 200)]
    val_per_class: usize,
    #[arg(long, default_value_t = 200)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    flip_prob: f64,
    #[arg(long, default_value_t = 4)]
    feature_dim: usize,
    #[arg(long, default_value_t = 8)]
    base_min: usize,
    #[arg(long, default_value_t = 20)]
    base_max: usize,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } | Error::NonFiniteGradient(_) => 4,
        _ => 3,
    }
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn gen(a: GenArgs) -> Result<(), Error> {
    let cfg = GenConfig {
        bias: a.bias,
        train_per_class: a.train_per_class,
        val_per_class: a.val_per_class,
        test_per_class: a.test_per_class,
        shift_mode: a.mode.parse::<ShiftMode>()?,
        piif_flip_prob: a.flip_prob,
        base_size_range: (a.base_min, a.base_max),
        feature_dim: a.feature_dim,
        seed: a.seed,
        ..GenConfig::default()
    };
    let data = gen_dataset(&cfg)?;
    save_dataset(&data, &a.out)
}

fn run_train(config: &Path, data: &Path, out: &Path) -> Result<(), Error> {
    let run: RunConfig = serde_json::from_str(&read(config)?)
        .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    run.validate()?;
    let data = load_dataset(data)?;
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.into(),
        source,
    })?;
    let exp = ExperimentConfig {
        gen: data.gen_config.clone(),
        run,
    };
    let (result, failure) = match train(&exp.run, &data) {
        Ok(outcome) => {
            outcome.checkpoint.save(out.join(CHECKPOINT_FILE))?;
            write(&out.join(LOG_FILE), &outcome.log.to_csv())?;
            let test = score(&outcome.checkpoint.params, &data.test, Execution::Parallel)?;
            let metrics = RunMetrics {
                test,
                best_epoch: outcome.best_epoch,
                best_val_acc: outcome.best_val_acc,
            };
            (
                RunResult {
                    config: exp,
                    status: RunStatus::Completed,
                    metrics: Some(metrics),
                },
                None,
            )
        }
        Err(e @ Error::Divergence { epoch, last_finite }) => (
            RunResult {
                config: exp,
                status: RunStatus::Diverged { epoch, last_finite },
                metrics: None,
            },
            Some(e),
        ),
        Err(e) => return Err(e),
    };
    let mut text = serde_json::to_string_pretty(&result)?;
    text.push('\n');
    write(&out.join(RECORD_FILE), &text)?;
    failure.map_or(Ok(()), Err)
}

fn eval(ckpt: &Path, data: &Path, split: SplitArg) -> Result<(), Error> {
    let ckpt = Checkpoint::load(ckpt)?;
    let data = load_dataset(data)?;
    let graphs = match split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
        SplitArg::Test => &data.test,
    };
    let scores = score(&ckpt.params, graphs, Execution::Parallel)?;
    println!("{}", serde_json::to_string_pretty(&scores)?);
    Ok(())
}

/// Every `record.json` below `dir`, in sorted path order.
fn find_records(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), Error> {
    let io = |source| Error::Io {
        path: dir.into(),
        source,
    };
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_records(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == RECORD_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn report(runs: &Path, out: &Path) -> Result<(), Error> {
    let mut paths = Vec::new();
    find_records(runs, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Domain(format!("no {RECORD_FILE} under {}", runs.display())));
    }
    let results = paths
        .iter()
        .map(|p| {
            serde_json::from_str::<RunResult>(&read(p)?)
                .map_err(|e| Error::Schema(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    RunReport::from_results(results)?.save(out)
}

fn plot(reports: &[PathBuf], metric: &str, out: &Path) -> Result<(), Error> {
    let reports = reports.iter().map(RunReport::load).collect::<Result<Vec<_>, _>>()?;
    write(out, &plot_curves(&reports, metric)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train { config, data, out } => run_train(&config, &data, &out),
        Command::Eval { ckpt, data, split } => eval(&ckpt, &data, split),
        Command::Report { runs, out } => report(&runs, &out),
        Command::Plot { reports, metric, out } => plot(&reports, &metric, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
