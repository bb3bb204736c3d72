//! Featurizer and classifier GNNs.
//!
//! The featurizer encodes the full graph, scores every edge with
//! `sigmoid(z_u . z_v)`, and keeps the `ceil(ratio * m)` best edges of each
//! graph as the estimated invariant subgraph. The classifier encoder then
//! runs on the kept edges, with each message scaled by its soft score, and
//! a linear head predicts the label. The complement edges, scaled by
//! `1 - score`, feed the same encoder and a separate MLP head.
//!
//! Subgraph readouts average over the nodes touched by the subgraph's
//! edges, so a graph whose complement is empty reads out a zero vector.

use std::cell::RefCell;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graphdata::Batch;
use crate::numerics::{column_moments, Matrix, MessageList, Tape, Var};
use crate::rng::SplitRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// Featurizer node embeddings.
    #[default]
    Embeddings,
    /// The graph's original node features.
    Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_classes: usize,
    /// Fraction of each graph's edges kept as the invariant subgraph.
    pub ratio: f64,
    #[serde(default)]
    pub classifier_input: ClassifierInput,
    /// Batch normalization after every hidden GCN layer.
    #[serde(default)]
    pub batch_norm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        if self.layers == 0 || self.hidden == 0 || self.feature_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "layers, hidden width and feature_dim must be positive and classes >= 2: {self:?}"
            )));
        }
        Ok(())
    }

    /// Stable digest of the architecture, used to match checkpoints.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn classifier_in_dim(&self) -> usize {
        match self.classifier_input {
            ClassifierInput::Embeddings => self.hidden,
            ClassifierInput::Features => self.feature_dim,
        }
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let h = self.hidden;
        for (prefix, d_in) in [("feat", self.feature_dim), ("clf", self.classifier_in_dim())] {
            for l in 0..self.layers {
                let fan_in = if l == 0 { d_in } else { h };
                out.push((format!("{prefix}.w{l}"), fan_in, h));
                out.push((format!("{prefix}.b{l}"), 1, h));
            }
        }
        out.push(("head_c.w".into(), h, self.num_classes));
        out.push(("head_c.b".into(), 1, self.num_classes));
        out.push(("head_s.w0".into(), h, h));
        out.push(("head_s.b0".into(), 1, h));
        out.push(("head_s.w1".into(), h, self.num_classes));
        out.push(("head_s.b1".into(), 1, self.num_classes));
        if self.batch_norm {
            for prefix in ["feat", "clf"] {
                for l in 0..self.layers - 1 {
                    out.push((format!("{prefix}.bn{l}.gamma"), 1, h));
                    out.push((format!("{prefix}.bn{l}.beta"), 1, h));
                }
            }
            for path in BnPath::ALL {
                for l in 0..self.layers - 1 {
                    out.push((format!("{}.bn{l}.mean", path.name()), 1, h));
                    out.push((format!("{}.bn{l}.var", path.name()), 1, h));
                }
            }
        }
        out
    }

    /// Whether the tensor at layout position `i` is a running statistic
    /// rather than a trained weight.
    pub fn is_buffer(&self, i: usize) -> bool {
        self.batch_norm && i >= self.buffer_offset()
    }

    fn bn_offset(&self) -> usize {
        4 * self.layers + 6
    }

    fn buffer_offset(&self) -> usize {
        self.bn_offset() + 4 * (self.layers - 1)
    }
}

/// All learnable matrices, in [`ModelConfig::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Matrix>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: ModelConfig, rng: &mut SplitRng) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, r, c)| {
                if name.ends_with(".gamma") || name.ends_with(".var") {
                    Matrix::filled(r, c, 1.0)
                } else if name.contains(".w") {
                    let limit = (6.0 / (r + c) as f64).sqrt();
                    let data = (0..r * c).map(|_| limit * (2.0 * rng.uniform() - 1.0)).collect();
                    Matrix::from_vec(r, c, data).expect("sized")
                } else {
                    Matrix::zeros(r, c)
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, r, c)| Matrix::zeros(r, c))
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Registers every weight as a tape leaf, in training mode.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if self.config.is_buffer(i) {
                    tape.constant(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        BoundParams::new(vars, &self.config, Mode::Train)
    }

    /// Registers every tensor as a constant (no gradients), in evaluation mode.
    pub fn bind_constant(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        BoundParams::new(vars, &self.config, Mode::Eval)
    }

    /// Folds batch statistics from a training forward pass into the running
    /// estimates: `running = (1 - m) running + m batch`, unbiased variance.
    pub fn update_running_stats(&mut self, stats: &[BnBatchStats]) {
        for st in stats {
            let n = st.rows as f64;
            let correction = if st.rows > 1 { n / (n - 1.0) } else { 1.0 };
            for (r, &b) in self.tensors[st.mean_index].data_mut().iter_mut().zip(&st.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, &b) in self.tensors[st.mean_index + 1].data_mut().iter_mut().zip(&st.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * correction;
            }
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Training mode normalizes with batch statistics; evaluation mode with
/// the running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which pass a set of running statistics belongs to. The two classifier
/// passes share weights but keep separate statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnPath {
    Featurizer,
    Invariant,
    Spurious,
}

impl BnPath {
    pub const ALL: [BnPath; 3] = [BnPath::Featurizer, BnPath::Invariant, BnPath::Spurious];

    fn name(self) -> &'static str {
        match self {
            BnPath::Featurizer => "feat",
            BnPath::Invariant => "inv",
            BnPath::Spurious => "spu",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Column statistics seen by one batch-norm layer during a training pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    /// Layout position of the running mean; the variance follows it.
    pub mean_index: usize,
    pub rows: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Tape handles for a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub mode: Mode,
    layers: usize,
    batch_norm: bool,
    stats: RefCell<Vec<BnBatchStats>>,
}

impl BoundParams {
    fn new(vars: Vec<Var>, cfg: &ModelConfig, mode: Mode) -> Self {
        BoundParams {
            vars,
            mode,
            layers: cfg.layers,
            batch_norm: cfg.batch_norm,
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Batch statistics recorded by training-mode passes so far.
    pub fn batch_stats(&self) -> Vec<BnBatchStats> {
        self.stats.borrow().clone()
    }

    fn bn_affine(&self, which: Encoder, l: usize) -> (Var, Var) {
        let per = 2 * (self.layers - 1);
        let o = 4 * self.layers + 6 + per * (which as usize) + 2 * l;
        (self.vars[o], self.vars[o + 1])
    }

    fn bn_running_index(&self, path: BnPath, l: usize) -> usize {
        let per = 2 * (self.layers - 1);
        4 * self.layers + 6 + 2 * per + per * path.index() + 2 * l
    }

    fn encoder(&self, which: Encoder) -> &[Var] {
        let l2 = 2 * self.layers;
        match which {
            Encoder::Featurizer => &self.vars[..l2],
            Encoder::Classifier => &self.vars[l2..2 * l2],
        }
    }

    fn head_c(&self) -> (Var, Var) {
        let o = 4 * self.layers;
        (self.vars[o], self.vars[o + 1])
    }

    fn head_s(&self) -> [Var; 4] {
        let o = 4 * self.layers + 2;
        [self.vars[o], self.vars[o + 1], self.vars[o + 2], self.vars[o + 3]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoder {
    Featurizer,
    Classifier,
}

/// Soft edge scores and the hard top-k selection, over a batch's merged edge list.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMask {
    pub soft: Vec<f64>,
    pub hard: Vec<bool>,
    /// Selected count per member graph.
    pub k: Vec<usize>,
}

impl EdgeMask {
    pub fn complement(&self) -> Vec<bool> {
        self.hard.iter().map(|h| !h).collect()
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.hard.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i)
    }
}

/// `ceil(ratio * m)`; at least one edge for `m >= 1`.
pub fn selection_size(m: usize, ratio: f64) -> usize {
    ((ratio * m as f64).ceil() as usize).clamp(1, m)
}

/// Keeps the `ceil(ratio * m)` highest scores; ties go to the lower index.
pub fn select_topk(scores: &[f64], ratio: f64) -> Result<EdgeMask> {
    let m = scores.len();
    if m == 0 {
        return Err(Error::DegenerateGraph("no edges to select from".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Domain(format!("ratio {ratio} outside (0, 1]")));
    }
    let k = selection_size(m, ratio);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hard = vec![false; m];
    for &i in &order[..k] {
        hard[i] = true;
    }
    Ok(EdgeMask {
        soft: scores.to_vec(),
        hard,
        k: vec![k],
    })
}

/// Per-graph top-k over a batch.
pub fn select_topk_batch(batch: &Batch, scores: &[f64], ratio: f64) -> Result<EdgeMask> {
    let mut hard = Vec::with_capacity(scores.len());
    let mut k = Vec::with_capacity(batch.num_graphs());
    for w in batch.edge_offsets.windows(2) {
        let part = select_topk(&scores[w[0]..w[1]], ratio)?;
        hard.extend(part.hard);
        k.extend(part.k);
    }
    Ok(EdgeMask {
        soft: scores.to_vec(),
        hard,
        k,
    })
}

fn batch_norm(tape: &mut Tape, params: &BoundParams, which: Encoder, path: BnPath, l: usize, h: Var) -> Result<Var> {
    let (gamma, beta) = params.bn_affine(which, l);
    let ri = params.bn_running_index(path, l);
    let normed = match params.mode {
        Mode::Train => {
            let (mean, var) = column_moments(tape.value(h));
            params.stats.borrow_mut().push(BnBatchStats {
                mean_index: ri,
                rows: tape.value(h).rows(),
                mean,
                var,
            });
            tape.standardize_cols(h, BN_EPS)?
        }
        Mode::Eval => {
            let mean = tape.value(params.vars[ri]).map(|m| -m);
            let inv = tape.value(params.vars[ri + 1]).map(|v| 1.0 / (v + BN_EPS).sqrt());
            let (mean, inv) = (tape.constant(mean), tape.constant(inv));
            let centered = tape.add_row(h, mean)?;
            tape.mul_row(centered, inv)?
        }
    };
    let scaled = tape.mul_row(normed, gamma)?;
    tape.add_row(scaled, beta)
}

#[allow(clippy::too_many_arguments)]
fn gcn_stack(
    tape: &mut Tape,
    params: &BoundParams,
    which: Encoder,
    path: BnPath,
    x: Var,
    messages: &Arc<MessageList>,
    edge_weight: Option<Var>,
) -> Result<Var> {
    let weights = params.encoder(which);
    let layers = weights.len() / 2;
    let mut h = x;
    for l in 0..layers {
        let agg = tape.propagate(h, edge_weight, messages.clone())?;
        let lin = tape.matmul(agg, weights[2 * l])?;
        h = tape.add_row(lin, weights[2 * l + 1])?;
        if l + 1 < layers {
            if params.batch_norm {
                h = batch_norm(tape, params, which, path, l, h)?;
            }
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Node embeddings from `layers` rounds of normalized propagation, and
/// their per-graph mean.
pub fn encode(
    tape: &mut Tape,
    batch: &Batch,
    params: &BoundParams,
    which: Encoder,
    x: Var,
) -> Result<(Var, Var)> {
    let messages = Arc::new(batch.gcn_messages(None));
    let path = match which {
        Encoder::Featurizer => BnPath::Featurizer,
        Encoder::Classifier => BnPath::Invariant,
    };
    let z = gcn_stack(tape, params, which, path, x, &messages, None)?;
    let h = tape.segment_mean(z, batch.full_segments(), batch.num_graphs())?;
    Ok((z, h))
}

/// `sigmoid(z_u . z_v)` for each stored edge, as an `m x 1` column.
pub fn edge_scores(tape: &mut Tape, z: Var, edges: &[(u32, u32)]) -> Result<Var> {
    let src = Arc::new(edges.iter().map(|&(u, _)| u as usize).collect());
    let dst = Arc::new(edges.iter().map(|&(_, v)| v as usize).collect());
    let zu = tape.gather_rows(z, src)?;
    let zv = tape.gather_rows(z, dst)?;
    let prod = tape.mul(zu, zv)?;
    let dot = tape.reduce(prod, crate::numerics::Reduction::Sum, crate::numerics::Axis::Cols)?;
    Ok(tape.sigmoid(dot))
}

/// Output of one subgraph head.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    /// Per-graph subgraph representation from the classifier encoder.
    pub repr: Var,
}

fn classify_subgraph(
    tape: &mut Tape,
    batch: &Batch,
    params: &BoundParams,
    x: Var,
    keep: &[bool],
    edge_weight: Var,
    path: BnPath,
) -> Result<Var> {
    let messages = Arc::new(batch.gcn_messages(Some(keep)));
    let z = gcn_stack(tape, params, Encoder::Classifier, path, x, &messages, Some(edge_weight))?;
    tape.segment_mean(z, batch.edge_induced_segments(keep), batch.num_graphs())
}

/// Classifier on the selected edges, each message scaled by its soft score.
pub fn classify_invariant(
    tape: &mut Tape,
    batch: &Batch,
    params: &BoundParams,
    x: Var,
    mask: &EdgeMask,
    scores: Var,
) -> Result<HeadOutput> {
    let repr = classify_subgraph(tape, batch, params, x, &mask.hard, scores, BnPath::Invariant)?;
    let (w, b) = params.head_c();
    let lin = tape.matmul(repr, w)?;
    let logits = tape.add_row(lin, b)?;
    Ok(HeadOutput { logits, repr })
}

/// Classifier on the complement edges, each message scaled by `1 - score`,
/// followed by the MLP head.
pub fn classify_spurious(
    tape: &mut Tape,
    batch: &Batch,
    params: &BoundParams,
    x: Var,
    mask: &EdgeMask,
    scores: Var,
) -> Result<HeadOutput> {
    let neg = tape.scale(scores, -1.0);
    let weight = tape.add_scalar(neg, 1.0);
    let repr = classify_subgraph(tape, batch, params, x, &mask.complement(), weight, BnPath::Spurious)?;
    let [w0, b0, w1, b1] = params.head_s();
    let h = tape.matmul(repr, w0)?;
    let h = tape.add_row(h, b0)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w1)?;
    let logits = tape.add_row(h, b1)?;
    Ok(HeadOutput { logits, repr })
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward {
    pub params: BoundParams,
    pub node_embeddings: Var,
    pub graph_repr: Var,
    pub scores: Var,
    pub mask: EdgeMask,
    pub invariant: HeadOutput,
    pub spurious: HeadOutput,
}

/// Full pass: featurizer, selection, and both heads.
pub fn forward(tape: &mut Tape, params: &ModelParams, batch: &Batch, track: bool) -> Result<Forward> {
    let bound = if track {
        params.bind(tape)
    } else {
        params.bind_constant(tape)
    };
    forward_bound(tape, bound, &params.config, batch)
}

/// [`forward`] over parameters already on the tape.
pub fn forward_bound(
    tape: &mut Tape,
    bound: BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<Forward> {
    if batch.features.cols() != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "batch feature dimension {} for a model expecting {}",
            batch.features.cols(),
            cfg.feature_dim
        )));
    }
    let x = tape.constant(batch.features.clone());
    let (z, graph_repr) = encode(tape, batch, &bound, Encoder::Featurizer, x)?;
    let scores = edge_scores(tape, z, &batch.edges)?;
    let mask = select_topk_batch(batch, tape.value(scores).data(), cfg.ratio)?;
    let clf_in = match cfg.classifier_input {
        ClassifierInput::Embeddings => z,
        ClassifierInput::Features => x,
    };
    let invariant = classify_invariant(tape, batch, &bound, clf_in, &mask, scores)?;
    let spurious = classify_spurious(tape, batch, &bound, clf_in, &mask, scores)?;
    Ok(Forward {
        params: bound,
        node_embeddings: z,
        graph_repr,
        scores,
        mask,
        invariant,
        spurious,
    })
}

/// Index of the largest logit in each row (lowest index on ties).
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            logits
                .row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub const CHECKPOINT_FORMAT: &str = "ciga-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    config_hash: String,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// Saved weights plus free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let config = self.params.config.clone();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config.hash(),
            extra: self.extra.clone(),
            tensors: self
                .params
                .names()
                .into_iter()
                .zip(&self.params.tensors)
                .map(|(name, t)| TensorRecord {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
            config,
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses a checkpoint; every tensor must match the shape its config implies.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("not a checkpoint: format `{}`", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        file.config.validate()?;
        if file.config.hash() != file.config_hash {
            return Err(Error::Schema("config hash does not match the stored config".into()));
        }
        let layout = file.config.layout();
        if layout.len() != file.tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, config implies {}",
                file.tensors.len(),
                layout.len()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, r, c), t) in layout.into_iter().zip(file.tensors) {
            if t.name != name || t.rows != r || t.cols != c {
                return Err(Error::Shape(format!(
                    "tensor `{}` is {}x{}, expected `{name}` {r}x{c}",
                    t.name, t.rows, t.cols
                )));
            }
            tensors.push(Matrix::from_vec(r, c, t.data)?);
        }
        Ok(Self {
            params: ModelParams {
                config: file.config,
                tensors,
            },
            extra: file.extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Loads and additionally requires the architecture to equal `expected`.
    pub fn load_matching(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.params.config.hash() != expected.hash() {
            return Err(Error::Shape(format!(
                "checkpoint architecture {:?} does not match {:?}",
                ckpt.params.config, expected
            )));
        }
        Ok(ckpt)
    }
}
