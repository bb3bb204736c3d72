use crate::graphdata::GraphMeta;
use crate::{Error, Result};

fn check_pair(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Domain("no predictions to score".into()));
    }
    Ok(())
}

/// Fraction of positions where `preds` equals `labels`.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Matthews correlation for 0/1 predictions; 0 when any marginal is empty.
pub fn mcc_binary(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let (mut tp, mut tn, mut fp, mut fne) = (0f64, 0f64, 0f64, 0f64);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1.0,
            (0, 0) => tn += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fne += 1.0,
            _ => return Err(Error::Domain(format!("non-binary pair ({p}, {y})"))),
        }
    }
    let denom = (tp + fp) * (tp + fne) * (tn + fp) * (tn + fne);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fne) / denom.sqrt())
}

/// `(recall, precision)` of the selected edges against the ground-truth motif
/// edges. Precision is 0 when nothing is selected.
pub fn motif_edge_recall(selected: &[bool], meta: &GraphMeta) -> Result<(f64, f64)> {
    if meta.gt_edges.is_empty() {
        return Err(Error::Domain("graph has no ground-truth motif edges".into()));
    }
    if let Some(&e) = meta.gt_edges.iter().find(|&&e| e >= selected.len()) {
        return Err(Error::Shape(format!(
            "ground-truth edge {e} outside a mask of {} edges",
            selected.len()
        )));
    }
    let hit = meta.gt_edges.iter().filter(|&&e| selected[e]).count() as f64;
    let chosen = selected.iter().filter(|&&s| s).count();
    let precision = if chosen == 0 { 0.0 } else { hit / chosen as f64 };
    Ok((hit / meta.gt_edges.len() as f64, precision))
}

/// Mean and sample standard deviation (`n - 1`); the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}
