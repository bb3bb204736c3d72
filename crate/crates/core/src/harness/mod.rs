//! Metrics, multi-seed experiments, run reports, and curve plots.

mod metrics;
mod plot;

pub use metrics::{accuracy, mcc_binary, mean_std, motif_edge_recall};
pub use plot::{plot_curves, SVG_HEIGHT, SVG_WIDTH};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graphdata::{DatasetSplits, Graph};
use crate::model::ModelParams;
use crate::par::{self, Execution};
use crate::scmgen::{gen_dataset, GenConfig};
use crate::trainer::{evaluate, train, RunConfig, TrainOutcome};
use crate::{Error, Result};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Metric names carried by every aggregate, in report order.
pub const METRICS: [&str; 4] = ["test_acc", "test_mcc", "motif_recall", "motif_precision"];

/// Scores of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    /// Only defined for two-class data.
    pub mcc: Option<f64>,
    /// Means over graphs that have ground-truth motif edges; `None` if no graph does.
    pub motif_recall: Option<f64>,
    pub motif_precision: Option<f64>,
}

/// Accuracy, MCC (binary only), and mean motif-edge recall/precision of the
/// invariant-subgraph selection.
pub fn score(params: &ModelParams, graphs: &[Graph], exec: Execution) -> Result<Scores> {
    let ev = evaluate(params, graphs, exec)?;
    let acc = accuracy(&ev.predictions, &ev.labels)?;
    let mcc = if params.config.num_classes == 2 {
        Some(mcc_binary(&ev.predictions, &ev.labels)?)
    } else {
        None
    };
    let (mut rs, mut ps) = (Vec::new(), Vec::new());
    for (sel, g) in ev.selected.iter().zip(graphs) {
        if !g.meta().gt_edges.is_empty() {
            let (r, p) = motif_edge_recall(sel, g.meta())?;
            rs.push(r);
            ps.push(p);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| mean_std(v).0);
    Ok(Scores {
        accuracy: acc,
        mcc,
        motif_recall: mean(&rs),
        motif_precision: mean(&ps),
    })
}

/// One cell of an experiment grid. Seeds inside are replaced per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Data and training seeds are both set to `seed`.
    pub fn seeded(&self, seed: u64) -> ExperimentConfig {
        let mut out = self.clone();
        out.gen.seed = seed;
        out.run.seed = seed;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, last_finite: Option<usize> },
    Failed { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub test: Scores,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Outcome of one (config, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Index into [`RunReport::configs`].
    pub config: usize,
    pub seed: u64,
    pub objective: String,
    pub shift_mode: String,
    pub bias: f64,
    #[serde(flatten)]
    pub status: RunStatus,
    pub metrics: Option<RunMetrics>,
}

impl RunRecord {
    fn metric(&self, name: &str) -> Option<f64> {
        let m = self.metrics.as_ref()?;
        match name {
            "test_acc" => Some(m.test.accuracy),
            "test_mcc" => m.test.mcc,
            "motif_recall" => m.test.motif_recall,
            "motif_precision" => m.test.motif_precision,
            _ => None,
        }
    }
}

/// A finished or aborted run before it is placed in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub metrics: Option<RunMetrics>,
}

/// Mean and sample deviation of one metric over the completed seeds of one config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config: usize,
    pub objective: String,
    pub shift_mode: String,
    pub bias: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Set when `n == 1`; `std` is then 0 by convention.
    pub single_seed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub config: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub toolkit_version: String,
    pub config_hash: String,
    pub configs: Vec<ExperimentConfig>,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    pub excluded: Vec<Exclusion>,
}

/// Trains and scores one seeded config on prepared data. Run failures are
/// captured in the status; only the outcome is returned on success.
pub fn run_single(cfg: &ExperimentConfig, data: &DatasetSplits) -> (RunResult, Option<TrainOutcome>) {
    let attempt = train(&cfg.run, data).and_then(|out| {
        let test = score(&out.checkpoint.params, &data.test, Execution::Sequential)?;
        Ok((test, out))
    });
    match attempt {
        Ok((test, out)) => (
            RunResult {
                config: cfg.clone(),
                status: RunStatus::Completed,
                metrics: Some(RunMetrics {
                    test,
                    best_epoch: out.best_epoch,
                    best_val_acc: out.best_val_acc,
                }),
            },
            Some(out),
        ),
        Err(e) => {
            let status = match e {
                Error::Divergence { epoch, last_finite } => RunStatus::Diverged { epoch, last_finite },
                other => RunStatus::Failed {
                    message: other.to_string(),
                },
            };
            (
                RunResult {
                    config: cfg.clone(),
                    status,
                    metrics: None,
                },
                None,
            )
        }
    }
}

/// Runs every grid cell under every seed and aggregates the results. Each
/// distinct (generator config, seed) dataset is generated once. Runs execute
/// concurrently under `Execution::Parallel`; the report does not depend on it.
pub fn run_experiment(grid: &[ExperimentConfig], seeds: &[u64], exec: Execution) -> Result<RunReport> {
    if seeds.is_empty() {
        return Err(Error::Domain("run_experiment needs at least one seed".into()));
    }
    if grid.is_empty() {
        return Err(Error::Domain("run_experiment needs at least one config".into()));
    }
    for cell in grid {
        cell.gen.validate()?;
        cell.run.validate()?;
    }
    let mut gens: Vec<GenConfig> = Vec::new();
    let mut jobs = Vec::new();
    for cell in grid {
        for &seed in seeds {
            let seeded = cell.seeded(seed);
            let data_idx = match gens.iter().position(|g| *g == seeded.gen) {
                Some(i) => i,
                None => {
                    gens.push(seeded.gen.clone());
                    gens.len() - 1
                }
            };
            jobs.push((seeded, data_idx));
        }
    }
    let datasets = par::map_slice(exec, &gens, gen_dataset)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let results = par::map_slice(exec, &jobs, |(cfg, d)| run_single(cfg, &datasets[*d]).0);
    RunReport::from_results(results)
}

fn unseeded(cfg: &ExperimentConfig) -> ExperimentConfig {
    cfg.seeded(0)
}

impl RunReport {
    /// Groups results by config (ignoring seeds) in first-seen order and
    /// aggregates the completed ones.
    pub fn from_results(results: Vec<RunResult>) -> Result<RunReport> {
        let mut configs: Vec<ExperimentConfig> = Vec::new();
        let mut records = Vec::with_capacity(results.len());
        for r in results {
            let key = unseeded(&r.config);
            let idx = match configs.iter().position(|c| *c == key) {
                Some(i) => i,
                None => {
                    configs.push(key);
                    configs.len() - 1
                }
            };
            records.push(RunRecord {
                config: idx,
                seed: r.config.run.seed,
                objective: r.config.run.objective.name().to_string(),
                shift_mode: r.config.gen.shift_mode.name().to_string(),
                bias: r.config.gen.bias,
                status: r.status,
                metrics: r.metrics,
            });
        }
        let excluded = records
            .iter()
            .filter(|r| r.status != RunStatus::Completed)
            .map(|r| Exclusion {
                config: r.config,
                seed: r.seed,
                reason: match &r.status {
                    RunStatus::Diverged { epoch, .. } => format!("diverged at epoch {epoch}"),
                    RunStatus::Failed { message } => message.clone(),
                    RunStatus::Completed => unreachable!(),
                },
            })
            .collect();
        let aggregates = aggregate(&configs, &records);
        let config_hash = hash_configs(&configs, &records)?;
        Ok(RunReport {
            toolkit_version: TOOLKIT_VERSION.to_string(),
            config_hash,
            configs,
            records,
            aggregates,
            excluded,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("run report: {e}")))
    }

    /// One line per aggregate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,objective,shift_mode,bias,metric,mean,std,n,single_seed\n");
        for a in &self.aggregates {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                a.config, a.objective, a.shift_mode, a.bias, a.metric, a.mean, a.std, a.n, a.single_seed
            )
            .expect("string write");
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to each other.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = path.as_ref().with_extension("json");
        let csv = path.as_ref().with_extension("csv");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunReport> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::from_json(&text)
    }

    pub fn aggregate(&self, config: usize, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.config == config && a.metric == metric)
    }
}

fn aggregate(configs: &[ExperimentConfig], records: &[RunRecord]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for (ci, cfg) in configs.iter().enumerate() {
        let done: Vec<&RunRecord> = records
            .iter()
            .filter(|r| r.config == ci && r.status == RunStatus::Completed)
            .collect();
        for metric in METRICS {
            let values: Vec<f64> = done.iter().filter_map(|r| r.metric(metric)).collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values);
            out.push(Aggregate {
                config: ci,
                objective: cfg.run.objective.name().to_string(),
                shift_mode: cfg.gen.shift_mode.name().to_string(),
                bias: cfg.gen.bias,
                metric: metric.to_string(),
                mean,
                std,
                n: values.len(),
                single_seed: values.len() == 1,
            });
        }
    }
    out
}

fn hash_configs(configs: &[ExperimentConfig], records: &[RunRecord]) -> Result<String> {
    let seeds: BTreeMap<usize, Vec<u64>> = records.iter().fold(BTreeMap::new(), |mut m, r| {
        m.entry(r.config).or_insert_with(Vec::new).push(r.seed);
        m
    });
    let text = serde_json::to_string(&(configs, seeds))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}
