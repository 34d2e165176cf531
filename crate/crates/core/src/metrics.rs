//! Evaluation metrics. All accumulate in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_rows(preds: &[Vec<f32>], targets: &[Vec<f32>], group: usize) -> Result<usize> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let dim = targets[0].len();
    if dim == 0 || dim % group != 0 {
        return Err(Error::Shape(format!("row width {dim} not divisible into groups of {group}")));
    }
    if preds.iter().chain(targets).any(|r| r.len() != dim) {
        return Err(Error::Shape("ragged prediction or target rows".into()));
    }
    Ok(dim)
}

/// Mean over samples of the mean Euclidean distance between consecutive
/// `group`-sized chunks (pairs for 2-D points, triplets for joints).
pub fn mean_euclidean(preds: &[Vec<f32>], targets: &[Vec<f32>], group: usize) -> Result<f64> {
    if group == 0 {
        return Err(Error::Shape("group size must be positive".into()));
    }
    let dim = check_rows(preds, targets, group)?;
    let per_sample = dim / group;
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            p.chunks(group)
                .zip(t.chunks(group))
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
                / per_sample as f64
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// End-point error: mean 3-D distance over all joints and samples.
pub fn epe(preds: &[Vec<f32>], targets: &[Vec<f32>]) -> Result<f64> {
    mean_euclidean(preds, targets, 3)
}

pub fn mae(preds: &[Vec<f32>], targets: &[Vec<f32>]) -> Result<f64> {
    let dim = check_rows(preds, targets, 1)?;
    let total: f64 = preds
        .iter()
        .zip(targets)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(&a, &b)| (a as f64 - b as f64).abs()))
        .sum();
    Ok(total / (preds.len() * dim) as f64)
}

fn check_ids(pred: &[usize], target: &[usize]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Data("metric over an empty set".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    check_ids(pred, target)?;
    let hits = pred.iter().zip(target).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Per-class recall for classes `0..classes`; `None` where a class has no support.
pub fn per_class_recall(pred: &[usize], target: &[usize], classes: usize) -> Result<Vec<Option<f64>>> {
    check_ids(pred, target)?;
    if let Some(&bad) = target.iter().chain(pred).find(|&&c| c >= classes) {
        return Err(Error::Index(format!("class {bad} outside 0..{classes}")));
    }
    let mut support = vec![0usize; classes];
    let mut hit = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(target) {
        support[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    Ok((0..classes)
        .map(|c| (support[c] > 0).then(|| hit[c] as f64 / support[c] as f64))
        .collect())
}

/// Mean recall over classes that occur in `target`.
pub fn balanced_accuracy(pred: &[usize], target: &[usize], classes: usize) -> Result<f64> {
    let recalls: Vec<f64> = per_class_recall(pred, target, classes)?.into_iter().flatten().collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Event decisions: argmax counts as a detected event only when its
/// probability reaches `threshold` and it is not `other_id`; everything else is
/// `other_id`.
pub fn event_decisions(probs: &[Vec<f32>], threshold: f32, other_id: usize) -> Result<Vec<usize>> {
    probs
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.is_empty() || row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Data(format!("probability row {i} is malformed")));
            }
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > 1e-4 {
                return Err(Error::Data(format!("probability row {i} sums to {s}")));
            }
            let best = crate::lm::argmax(row);
            Ok(if row[best] >= threshold && best != other_id {
                best
            } else {
                other_id
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Confusion counts per class of `decisions` against `target`.
pub fn class_counts(decisions: &[usize], target: &[usize], classes: usize) -> Vec<ClassCounts> {
    let mut out = vec![ClassCounts { tp: 0, fp: 0, fn_: 0 }; classes];
    for (&p, &t) in decisions.iter().zip(target) {
        if p == t {
            out[t].tp += 1;
        } else {
            out[p].fp += 1;
            out[t].fn_ += 1;
        }
    }
    out
}

/// Macro F1 over event classes (every class except `other_id`). Classes with
/// neither support nor predictions are skipped; if all are skipped the score
/// is 1.
pub fn event_f1(probs: &[Vec<f32>], target: &[usize], threshold: f32, other_id: usize) -> Result<f64> {
    let classes = probs.first().map_or(0, |r| r.len());
    if probs.iter().any(|r| r.len() != classes) {
        return Err(Error::Shape("ragged probability rows".into()));
    }
    if other_id >= classes {
        return Err(Error::Index(format!("other class {other_id} outside 0..{classes}")));
    }
    let dec = event_decisions(probs, threshold, other_id)?;
    check_ids(&dec, target)?;
    if let Some(&bad) = target.iter().find(|&&c| c >= classes) {
        return Err(Error::Index(format!("class {bad} outside 0..{classes}")));
    }
    let counts = class_counts(&dec, target, classes);
    let f1s: Vec<f64> = counts
        .iter()
        .enumerate()
        .filter(|&(c, k)| c != other_id && 2 * k.tp + k.fp + k.fn_ > 0)
        .map(|(_, k)| 2.0 * k.tp as f64 / (2 * k.tp + k.fp + k.fn_) as f64)
        .collect();
    Ok(if f1s.is_empty() {
        1.0
    } else {
        f1s.iter().sum::<f64>() / f1s.len() as f64
    })
}
