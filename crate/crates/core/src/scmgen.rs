//! Motif-on-base synthetic benchmark.
//!
//! Each graph plants one of three motifs (the class) onto one of three base
//! families. In the training split the base family co-occurs with its paired
//! class with probability `bias` and with each other class with
//! `(1 - bias) / 2`; validation and test splits are unbiased. Attribute
//! modes additionally set every node feature to a one-hot class pattern that
//! follows the same bias, optionally after flipping the label.
//!
//! Every graph draws from its own stream `(seed, split << 32 | index)`, so
//! generation is order-independent and can run in parallel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::{DatasetSplits, Graph, GraphMeta};
use crate::numerics::Matrix;
use crate::par::{self, Execution};
use crate::rng::SplitRng;

pub const NUM_CLASSES: usize = 3;

/// Lowest accepted bias. 0.33 is the customary two-digit spelling of 1/3.
pub const MIN_BIAS: f64 = 0.33;
pub const UNBIASED: f64 = 1.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotifKind {
    House,
    Cycle,
    Crane,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaseKind {
    Tree,
    Ladder,
    Wheel,
}

impl MotifKind {
    pub const ALL: [MotifKind; 3] = [MotifKind::House, MotifKind::Cycle, MotifKind::Crane];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl BaseKind {
    pub const ALL: [BaseKind; 3] = [BaseKind::Tree, BaseKind::Ladder, BaseKind::Wheel];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Base family spuriously paired with class `y`.
    pub fn paired_with(y: usize) -> Self {
        Self::ALL[y % NUM_CLASSES]
    }

    /// Smallest node count the family supports.
    pub fn min_size(self) -> usize {
        match self {
            BaseKind::Tree => 2,
            BaseKind::Ladder => 4,
            BaseKind::Wheel => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Structural bias only; node features are i.i.d. standard normal.
    Struc,
    /// Structural bias plus one-hot features biased toward the label.
    MixedFiif,
    /// As `MixedFiif`, but labels are first flipped with `piif_flip_prob`
    /// and features follow the flipped label.
    MixedPiif,
}

impl ShiftMode {
    pub fn name(self) -> &'static str {
        match self {
            ShiftMode::Struc => "struc",
            ShiftMode::MixedFiif => "mixed_fiif",
            ShiftMode::MixedPiif => "mixed_piif",
        }
    }
}

impl std::str::FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "struc" => Ok(ShiftMode::Struc),
            "mixed_fiif" => Ok(ShiftMode::MixedFiif),
            "mixed_piif" => Ok(ShiftMode::MixedPiif),
            other => Err(Error::Config(format!("unknown shift mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_classes: usize,
    pub bias: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub shift_mode: ShiftMode,
    pub piif_flip_prob: f64,
    /// Inclusive node-count range for base graphs.
    pub base_size_range: (usize, usize),
    /// Base size range for validation/test; `None` reuses `base_size_range`.
    #[serde(default)]
    pub eval_base_size_range: Option<(usize, usize)>,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: NUM_CLASSES,
            bias: 0.9,
            train_per_class: 3000,
            val_per_class: 1000,
            test_per_class: 1000,
            shift_mode: ShiftMode::Struc,
            piif_flip_prob: 0.05,
            base_size_range: (8, 20),
            eval_base_size_range: None,
            feature_dim: 4,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if !(MIN_BIAS..=1.0).contains(&self.bias) {
            return bad(format!("bias {} outside [1/3, 1]", self.bias));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return bad("per-class counts must be positive".into());
        }
        if !(0.0..0.5).contains(&self.piif_flip_prob) {
            return bad(format!("piif_flip_prob {} outside [0, 0.5)", self.piif_flip_prob));
        }
        let min_base = BaseKind::ALL.iter().map(|b| b.min_size()).max().unwrap();
        for (lo, hi) in std::iter::once(self.base_size_range).chain(self.eval_base_size_range) {
            if lo > hi || lo < min_base {
                return bad(format!("base size range [{lo}, {hi}] invalid (minimum {min_base})"));
            }
        }
        if self.shift_mode != ShiftMode::Struc && self.feature_dim < self.num_classes {
            return bad(format!(
                "feature_dim {} cannot hold one-hot class patterns",
                self.feature_dim
            ));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        Ok(())
    }
}

/// Node count and canonical (`u < v`) edge list of a generated piece.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fragment {
    pub num_nodes: usize,
    pub edges: Vec<(u32, u32)>,
}

impl Fragment {
    fn new(num_nodes: usize, edges: impl IntoIterator<Item = (u32, u32)>) -> Self {
        Self {
            num_nodes,
            edges: edges.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect(),
        }
    }
}

/// House: 4-cycle plus an apex joined to two adjacent cycle nodes.
/// Cycle: C5. Crane: 4-cycle body, a 3-node boom off one corner, and a
/// pendant hook at the boom's end.
pub fn gen_motif(kind: MotifKind) -> Fragment {
    match kind {
        MotifKind::House => Fragment::new(5, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)]),
        MotifKind::Cycle => Fragment::new(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]),
        MotifKind::Crane => Fragment::new(
            8,
            [(0, 1), (1, 2), (2, 3), (3, 0), (3, 4), (4, 5), (5, 6), (6, 7)],
        ),
    }
}

/// Base graph with `size` nodes.
///
/// Tree: complete binary tree in heap order. Ladder: two rails of
/// `size / 2` nodes joined by rungs (odd sizes round down). Wheel: hub plus
/// a `(size - 1)`-cycle rim.
pub fn gen_base(kind: BaseKind, size: usize) -> Result<Fragment> {
    if size < kind.min_size() {
        return Err(Error::Domain(format!(
            "{kind:?} needs at least {} nodes, got {size}",
            kind.min_size()
        )));
    }
    Ok(match kind {
        BaseKind::Tree => Fragment::new(size, (1..size as u32).map(|i| ((i - 1) / 2, i))),
        BaseKind::Ladder => {
            let l = (size / 2) as u32;
            let rails = (0..l - 1).flat_map(|i| [(i, i + 1), (l + i, l + i + 1)]);
            let rungs = (0..l).map(|i| (i, l + i));
            Fragment::new(2 * l as usize, rails.chain(rungs))
        }
        BaseKind::Wheel => {
            let n = size as u32;
            let rim = (1..n).map(|i| (i, if i + 1 < n { i + 1 } else { 1 }));
            let spokes = (1..n).map(|i| (0, i));
            Fragment::new(size, rim.chain(spokes))
        }
    })
}

/// Draws a class in `0..3` equal to `y` with probability `bias` and each
/// other class with `(1 - bias) / 2`.
fn biased_class(y: usize, bias: f64, rng: &mut SplitRng) -> usize {
    if rng.uniform() < bias {
        y
    } else {
        (y + 1 + rng.below(NUM_CLASSES - 1)) % NUM_CLASSES
    }
}

/// Motif for class `y` and a base family following the spurious pairing.
pub fn sample_pair(y: usize, bias: f64, rng: &mut SplitRng) -> (MotifKind, BaseKind) {
    let motif = MotifKind::from_index(y).expect("class index below 3");
    let base = BaseKind::from_index(biased_class(y, bias, rng)).expect("base index below 3");
    (motif, base)
}

/// Joins base and motif with one connector edge between uniformly chosen
/// endpoints. Base nodes come first; features are empty and the label is the
/// motif index.
pub fn attach(
    base: (BaseKind, &Fragment),
    motif: (MotifKind, &Fragment),
    rng: &mut SplitRng,
) -> Result<Graph> {
    let (base_kind, base) = base;
    let (motif_kind, motif) = motif;
    if base.num_nodes == 0 || motif.num_nodes == 0 {
        return Err(Error::Domain("cannot attach an empty fragment".into()));
    }
    let off = base.num_nodes as u32;
    let mut edges = base.edges.clone();
    let gt_start = edges.len();
    edges.extend(motif.edges.iter().map(|&(u, v)| (u + off, v + off)));
    let gt_edges = (gt_start..edges.len()).collect();
    let b = rng.below(base.num_nodes) as u32;
    let m = rng.below(motif.num_nodes) as u32 + off;
    edges.push((b, m));
    let n = base.num_nodes + motif.num_nodes;
    Graph::new(
        n,
        edges,
        Matrix::zeros(n, 0),
        motif_kind.index(),
        GraphMeta {
            motif: motif_kind.index(),
            base: base_kind.index(),
            attr: None,
            gt_edges,
            flipped: false,
        },
    )
}

/// Writes node features (and, under PIIF, the possibly flipped label).
pub fn apply_attr_shift(
    g: Graph,
    mode: ShiftMode,
    bias: f64,
    flip_prob: f64,
    feature_dim: usize,
    rng: &mut SplitRng,
) -> Graph {
    let y = g.label();
    let n = g.num_nodes();
    let one_hot = |class: usize| {
        let mut x = Matrix::zeros(n, feature_dim);
        for r in 0..n {
            x.set(r, class, 1.0);
        }
        x
    };
    match mode {
        ShiftMode::Struc => {
            let x = Matrix::from_vec(n, feature_dim, (0..n * feature_dim).map(|_| rng.normal()).collect())
                .expect("sized buffer");
            g.with_features(x, None)
        }
        ShiftMode::MixedFiif => {
            let a = biased_class(y, bias, rng);
            g.with_features(one_hot(a), Some(a))
        }
        ShiftMode::MixedPiif => {
            // no draw at flip_prob 0, so the stream matches MixedFiif exactly
            let flipped = flip_prob > 0.0 && rng.uniform() < flip_prob;
            let label = if flipped {
                (y + 1 + rng.below(NUM_CLASSES - 1)) % NUM_CLASSES
            } else {
                y
            };
            let a = biased_class(label, bias, rng);
            g.with_label(label, flipped).with_features(one_hot(a), Some(a))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

/// One graph of class `y` with its own random stream.
pub fn gen_graph(cfg: &GenConfig, split: Split, index: usize, y: usize) -> Result<Graph> {
    let mut rng = SplitRng::new(cfg.seed, ((split as u64) << 32) | index as u64);
    let train = split == Split::Train;
    let bias = if train { cfg.bias } else { UNBIASED };
    let (motif_kind, base_kind) = sample_pair(y, bias, &mut rng);
    let (lo, hi) = if train {
        cfg.base_size_range
    } else {
        cfg.eval_base_size_range.unwrap_or(cfg.base_size_range)
    };
    let size = rng.range_inclusive(lo, hi);
    let base = gen_base(base_kind, size)?;
    let motif = gen_motif(motif_kind);
    let g = attach((base_kind, &base), (motif_kind, &motif), &mut rng)?;
    // held-out splits keep clean labels
    let flip = if train { cfg.piif_flip_prob } else { 0.0 };
    Ok(apply_attr_shift(g, cfg.shift_mode, bias, flip, cfg.feature_dim, &mut rng))
}

fn gen_split(cfg: &GenConfig, split: Split, per_class: usize, exec: Execution) -> Result<Vec<Graph>> {
    par::map_range(exec, per_class * NUM_CLASSES, |i| {
        gen_graph(cfg, split, i, i / per_class)
    })
    .into_iter()
    .collect()
}

pub fn gen_dataset(cfg: &GenConfig) -> Result<DatasetSplits> {
    gen_dataset_with(cfg, Execution::Parallel)
}

pub fn gen_dataset_with(cfg: &GenConfig, exec: Execution) -> Result<DatasetSplits> {
    cfg.validate()?;
    Ok(DatasetSplits {
        train: gen_split(cfg, Split::Train, cfg.train_per_class, exec)?,
        val: gen_split(cfg, Split::Val, cfg.val_per_class, exec)?,
        test: gen_split(cfg, Split::Test, cfg.test_per_class, exec)?,
        gen_config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests;
