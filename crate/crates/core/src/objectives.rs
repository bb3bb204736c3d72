//! Training losses: cross-entropy risk, the supervised contrastive estimator
//! of the invariant-subgraph mutual information, the hinge term on the
//! spurious head, their CIGA combinations, and the IRMv1 baseline penalty.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::{Axis, Matrix, Reduction, Tape, Var};
use crate::rng::SplitRng;
use crate::{Error, Result};

/// Which comparison activates the hinge term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HingeDirection {
    /// Active while `r_c <= r_s`.
    #[default]
    CausalBelowSpurious,
    /// Active while `r_s <= r_c`.
    SpuriousBelowCausal,
}

impl HingeDirection {
    fn active(self, r_c: f64, r_s: f64) -> bool {
        match self {
            HingeDirection::CausalBelowSpurious => r_c <= r_s,
            HingeDirection::SpuriousBelowCausal => r_s <= r_c,
        }
    }
}

fn default_tau() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub hinge_direction: HingeDirection,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            tau: 1.0,
            hinge_direction: HingeDirection::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Mean risk and the per-sample risks it averages.
#[derive(Clone, Copy, Debug)]
pub struct Risk {
    /// 1x1.
    pub mean: Var,
    /// Nx1.
    pub per_sample: Var,
}

/// Softmax cross-entropy against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Risk> {
    let lp = tape.log_softmax(logits);
    let picked = tape.pick_cols(lp, Arc::new(labels.to_vec()))?;
    let per_sample = tape.scale(picked, -1.0);
    let mean = tape.mean_all(per_sample)?;
    Ok(Risk { mean, per_sample })
}

/// Contrastive estimate plus how many anchors contributed.
#[derive(Clone, Copy, Debug)]
pub struct Contrast {
    pub value: Var,
    pub anchors: usize,
}

impl Contrast {
    /// No anchor had a same-class partner, so the value is a constant zero.
    pub fn is_empty(&self) -> bool {
        self.anchors == 0
    }
}

/// Supervised contrastive loss over cosine similarities of `h` (one row per graph).
///
/// Every anchor with at least one positive contributes the mean over its
/// positives of `-log(e^{s_ip} / (e^{s_ip} + sum_n e^{s_in}))`, where the
/// negatives are all different-label rows and `s = cos / tau`. The result is
/// the mean over contributing anchors.
pub fn contrastive_cmi(tape: &mut Tape, h: Var, labels: &[usize], tau: f64) -> Result<Contrast> {
    let n = tape.value(h).rows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "contrastive_cmi: {} labels for {n} representations",
            labels.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
    }
    let mut negatives = vec![false; n * n];
    let mut positives: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if labels[i] != labels[j] {
                negatives[i * n + j] = true;
            } else if i != j {
                positives[i].push(j);
            }
        }
    }
    let anchors = positives.iter().filter(|p| !p.is_empty()).count();
    if anchors == 0 {
        let value = tape.constant(Matrix::scalar(0.0));
        return Ok(Contrast { value, anchors });
    }
    let mut weights = Matrix::zeros(n, n);
    for (i, p) in positives.iter().enumerate() {
        let w = 1.0 / (p.len() * anchors) as f64;
        for &j in p {
            weights.set(i, j, w);
        }
    }
    let unit = tape.normalize_rows(h);
    let unit_t = tape.transpose(unit);
    let cos = tape.matmul(unit, unit_t)?;
    let s = tape.scale(cos, 1.0 / tau);
    let lse = tape.pair_logsumexp(s, Arc::new(negatives))?;
    let terms = tape.sub(lse, s)?;
    let w = tape.constant(weights);
    let weighted = tape.mul(terms, w)?;
    let value = tape.sum_all(weighted)?;
    Ok(Contrast { value, anchors })
}

/// `(1/N) sum_i r_s[i] * 1[active(r_c[i], r_s[i])]`, with the indicator held constant.
pub fn hinge_spurious(
    tape: &mut Tape,
    r_s: Var,
    r_c: Var,
    direction: HingeDirection,
) -> Result<Var> {
    let (vs, vc) = (tape.value(r_s), tape.value(r_c));
    if vs.shape() != vc.shape() || vs.cols() != 1 {
        return Err(Error::Shape(format!(
            "hinge_spurious: risks shaped {:?} and {:?}",
            vs.shape(),
            vc.shape()
        )));
    }
    let n = vs.rows();
    let mask: Vec<f64> = vc
        .data()
        .iter()
        .zip(vs.data())
        .map(|(&c, &s)| if direction.active(c, s) { 1.0 } else { 0.0 })
        .collect();
    let mask = tape.constant(Matrix::column(&mask));
    let active = tape.mul(r_s, mask)?;
    let total = tape.sum_all(active)?;
    Ok(tape.scale(total, 1.0 / n.max(1) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CigaVersion {
    V1,
    V2,
}

/// `risk + alpha * contrast`, plus `beta * hinge` for v2. Zero-weighted terms
/// are left off the tape entirely.
pub fn ciga_loss(
    tape: &mut Tape,
    version: CigaVersion,
    risk: Var,
    contrast: Var,
    hinge: Var,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = risk;
    if w.alpha != 0.0 {
        let c = tape.scale(contrast, w.alpha);
        total = tape.add(total, c)?;
    }
    if version == CigaVersion::V2 && w.beta != 0.0 {
        let h = tape.scale(hinge, w.beta);
        total = tape.add(total, h)?;
    }
    Ok(total)
}

/// Assigns each of `n` samples to one of two environments of sizes
/// `n / 2` and `n - n / 2`.
pub fn random_halves(n: usize, rng: &mut SplitRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut env = vec![0; n];
    for &i in &order[n / 2..] {
        env[i] = 1;
    }
    env
}

/// IRMv1 penalty: for each environment, the derivative of its mean
/// cross-entropy with respect to a scalar multiplier on the logits at 1,
/// squared and summed over environments. Uses the closed form
/// `mean_i sum_k (softmax_ik - onehot_ik) * logit_ik`; empty environments
/// contribute nothing.
pub fn irm_penalty(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    env: &[usize],
    num_envs: usize,
) -> Result<Var> {
    let (n, c) = tape.value(logits).shape();
    if labels.len() != n || env.len() != n {
        return Err(Error::Shape(format!(
            "irm_penalty: {n} rows, {} labels, {} environment ids",
            labels.len(),
            env.len()
        )));
    }
    let mut onehot = Matrix::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Domain(format!("label {y} with {c} classes")));
        }
        onehot.set(i, y, 1.0);
    }
    let lp = tape.log_softmax(logits);
    let p = tape.exp(lp);
    let onehot = tape.constant(onehot);
    let resid = tape.sub(p, onehot)?;
    let prod = tape.mul(resid, logits)?;
    let per_sample = tape.reduce(prod, Reduction::Sum, Axis::Cols)?;
    let segments = Arc::new(env.iter().map(|&e| Some(e)).collect());
    let grads = tape.segment_mean(per_sample, segments, num_envs)?;
    let sq = tape.mul(grads, grads)?;
    tape.sum_all(sq)
}
