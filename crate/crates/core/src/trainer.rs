//! Training loop: Adam, shuffled mini-batches, a pretraining phase without
//! early stopping, and model selection on validation accuracy.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::graphdata::{Batch, DatasetSplits, Graph};
use crate::model::{argmax_rows, forward, Checkpoint, ClassifierInput, Forward, ModelConfig, ModelParams};
use crate::numerics::{Matrix, Tape, Var};
use crate::objectives::{
    ciga_loss, contrastive_cmi, cross_entropy, hinge_spurious, irm_penalty, random_halves, CigaVersion,
    Contrast, LossWeights,
};
use crate::par::{self, Execution};
use crate::rng::SplitRng;
use crate::{Error, Result};

const INIT_STREAM: u64 = 1 << 40;
const SHUFFLE_STREAM: u64 = 2 << 40;
const ENV_STREAM: u64 = 3 << 40;

/// Graphs per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Erm,
    Irm,
    CigaV1,
    CigaV2,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Erm => "erm",
            Objective::Irm => "irm",
            Objective::CigaV1 => "ciga_v1",
            Objective::CigaV2 => "ciga_v2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub objective: Objective,
    pub loss: LossWeights,
    /// Weight of the IRMv1 penalty; only read by the `irm` objective.
    pub irm_lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub pretrain_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Fraction of each graph's edges kept in the invariant subgraph.
    pub ratio: f64,
    pub layers: usize,
    pub hidden: usize,
    pub classifier_input: ClassifierInput,
    pub batch_norm: bool,
    /// Global gradient-norm cap; off when `None`.
    pub grad_clip: Option<f64>,
    /// Record real per-epoch wall time. Off by default so logs are byte-reproducible.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            objective: Objective::Erm,
            loss: LossWeights::default(),
            irm_lambda: 1.0,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            pretrain_epochs: 20,
            patience: 5,
            seed: 0,
            ratio: 0.25,
            layers: 3,
            hidden: 32,
            classifier_input: ClassifierInput::Embeddings,
            batch_norm: false,
            grad_clip: None,
            log_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.irm_lambda >= 0.0 && self.irm_lambda.is_finite()) {
            return fail(format!("irm_lambda must be >= 0, got {}", self.irm_lambda));
        }
        let min_batch = match self.objective {
            Objective::CigaV1 | Objective::CigaV2 | Objective::Irm => 2,
            Objective::Erm => 1,
        };
        if self.batch_size < min_batch {
            return fail(format!(
                "batch_size {} too small for {}",
                self.batch_size,
                self.objective.name()
            ));
        }
        if self.pretrain_epochs >= self.max_epochs {
            return fail(format!(
                "pretrain_epochs {} must be below max_epochs {}",
                self.pretrain_epochs, self.max_epochs
            ));
        }
        if self.patience == 0 {
            return fail("patience must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be > 0, got {c}"));
            }
        }
        self.model_config(1, 2).validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self, feature_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            hidden: self.hidden,
            layers: self.layers,
            num_classes,
            ratio: self.ratio,
            classifier_input: self.classifier_input,
            batch_norm: self.batch_norm,
        }
    }
}

/// Adam moments for each parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Leaves everything untouched if any
/// gradient is non-finite.
pub fn adam_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!(
                "adam_step: parameter {i} is {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(format!("#{i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Index batches over `0..n` for one epoch; the last batch may be short.
pub fn shuffle_and_batch(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitRng::new(seed, SHUFFLE_STREAM | epoch as u64).shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Loss pieces for one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchTerms {
    /// The quantity that is differentiated.
    pub loss: Var,
    /// Mean risk of the invariant head.
    pub risk: Var,
    pub contrast: Contrast,
    pub hinge: Var,
    pub penalty: Option<Var>,
}

/// Builds the configured objective on top of a forward pass. The contrastive
/// and hinge terms are always computed so every objective logs them.
/// `env` assigns samples to environments and is required for `irm`.
pub fn objective_terms(
    tape: &mut Tape,
    fwd: &Forward,
    labels: &[usize],
    cfg: &RunConfig,
    env: Option<&[usize]>,
) -> Result<BatchTerms> {
    let rc = cross_entropy(tape, fwd.invariant.logits, labels)?;
    let rs = cross_entropy(tape, fwd.spurious.logits, labels)?;
    let contrast = contrastive_cmi(tape, fwd.invariant.repr, labels, cfg.loss.tau)?;
    let hinge = hinge_spurious(tape, rs.per_sample, rc.per_sample, cfg.loss.hinge_direction)?;
    let mut penalty = None;
    let loss = match cfg.objective {
        Objective::Erm => rc.mean,
        Objective::Irm => {
            let env = env.ok_or_else(|| Error::Contract("irm needs environment ids".into()))?;
            let p = irm_penalty(tape, fwd.invariant.logits, labels, env, 2)?;
            penalty = Some(p);
            let scaled = tape.scale(p, cfg.irm_lambda);
            tape.add(rc.mean, scaled)?
        }
        Objective::CigaV1 => ciga_loss(tape, CigaVersion::V1, rc.mean, contrast.value, hinge, &cfg.loss)?,
        Objective::CigaV2 => ciga_loss(tape, CigaVersion::V2, rc.mean, contrast.value, hinge, &cfg.loss)?,
    };
    Ok(BatchTerms {
        loss,
        risk: rc.mean,
        contrast,
        hinge,
        penalty,
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub contrast_term: f64,
    pub hinge_term: f64,
    pub wall_ms: u64,
    /// Batches in which no sample had a same-class partner.
    pub no_positive_batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<EpochLog>,
}

impl TrainingLog {
    pub const HEADER: &'static str =
        "epoch,train_loss,train_acc,val_acc,contrast_term,hinge_term,wall_ms,no_positive_batches";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_acc,
                r.val_acc,
                r.contrast_term,
                r.hinge_term,
                r.wall_ms,
                r.no_positive_batches
            )
            .expect("string write");
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Predictions of the invariant head and the selected edges of each graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub selected: Vec<Vec<bool>>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let hits = self.predictions.iter().zip(&self.labels).filter(|(p, y)| p == y).count();
        hits as f64 / self.labels.len() as f64
    }
}

/// Runs the model over `graphs` in fixed-size chunks; chunks may run in parallel.
pub fn evaluate(params: &ModelParams, graphs: &[Graph], exec: Execution) -> Result<Evaluation> {
    let chunks: Vec<&[Graph]> = graphs.chunks(EVAL_CHUNK).collect();
    let parts = par::map_slice(exec, &chunks, |chunk| -> Result<_> {
        let batch = Batch::new(chunk)?;
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, params, &batch, false)?;
        let preds = argmax_rows(tape.value(fwd.invariant.logits));
        let selected = batch
            .edge_offsets
            .windows(2)
            .map(|w| fwd.mask.hard[w[0]..w[1]].to_vec())
            .collect::<Vec<_>>();
        Ok((preds, selected))
    });
    let mut out = Evaluation {
        predictions: Vec::with_capacity(graphs.len()),
        labels: graphs.iter().map(Graph::label).collect(),
        selected: Vec::with_capacity(graphs.len()),
    };
    for part in parts {
        let (p, s) = part?;
        out.predictions.extend(p);
        out.selected.extend(s);
    }
    Ok(out)
}

fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// Trains one model. Deterministic in `(cfg, data)`.
pub fn train(cfg: &RunConfig, data: &DatasetSplits) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Domain("training and validation splits must be non-empty".into()));
    }
    let feature_dim = data.train[0].feature_dim();
    let num_classes = data.gen_config.num_classes;
    let model_cfg = cfg.model_config(feature_dim, num_classes);
    let mut params = ModelParams::init(model_cfg, &mut SplitRng::new(cfg.seed, INIT_STREAM))?;
    let mut state = OptimizerState::new(&params.tensors);
    let mut log = TrainingLog::default();
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut env_rng = SplitRng::new(cfg.seed, ENV_STREAM | epoch as u64);
        let (mut loss_sum, mut contrast_sum, mut hinge_sum) = (0.0, 0.0, 0.0);
        let mut hits = 0usize;
        let mut no_positive = 0usize;
        let diverged = || Error::Divergence {
            epoch,
            last_finite: epoch.checked_sub(1),
        };
        for idx in shuffle_and_batch(data.train.len(), cfg.batch_size, cfg.seed, epoch) {
            let members: Vec<&Graph> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::from_refs(&members)?;
            let n = batch.num_graphs() as f64;
            let mut tape = Tape::new();
            let fwd = forward(&mut tape, &params, &batch, true)?;
            let env = match cfg.objective {
                Objective::Irm => Some(random_halves(batch.num_graphs(), &mut env_rng)),
                _ => None,
            };
            let terms = objective_terms(&mut tape, &fwd, &batch.labels, cfg, env.as_deref())?;
            let loss = tape.scalar(terms.loss);
            if !loss.is_finite() {
                return Err(diverged());
            }
            loss_sum += loss * n;
            contrast_sum += tape.scalar(terms.contrast.value) * n;
            hinge_sum += tape.scalar(terms.hinge) * n;
            no_positive += usize::from(terms.contrast.is_empty());
            hits += argmax_rows(tape.value(fwd.invariant.logits))
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p == y)
                .count();

            let mut grads = tape.backward(terms.loss)?;
            let mut g: Vec<Matrix> = fwd
                .params
                .vars
                .iter()
                .zip(&params.tensors)
                .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Matrix::zeros(t.rows(), t.cols())))
                .collect();
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut g, c);
            }
            adam_step(&mut params.tensors, &g, &mut state, cfg.learning_rate).map_err(|e| match e {
                Error::NonFiniteGradient(_) => diverged(),
                other => other,
            })?;
            params.update_running_stats(&fwd.params.batch_stats());
        }
        let total = data.train.len() as f64;
        let val_acc = evaluate(&params, &data.val, Execution::Sequential)?.accuracy();
        let wall_ms = if cfg.log_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        log.rows.push(EpochLog {
            epoch,
            train_loss: loss_sum / total,
            train_acc: hits as f64 / total,
            val_acc,
            contrast_term: contrast_sum / total,
            hinge_term: hinge_sum / total,
            wall_ms,
            no_positive_batches: no_positive,
        });
        if best.as_ref().map_or(true, |(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, params.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch + 1 >= cfg.pretrain_epochs && epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    let (best_epoch, best_val_acc, best_params) = best.expect("at least one epoch");
    let checkpoint = Checkpoint {
        params: best_params,
        extra: serde_json::json!({
            "best_epoch": best_epoch,
            "best_val_acc": best_val_acc,
            "run_config": cfg,
        }),
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        best_epoch,
        best_val_acc,
    })
}
