//! Straightforward reference implementations of the metrics, written without
//! sharing code with the library, and checks against them.
#![allow(dead_code)]

use iotlm::metrics::{
    accuracy, balanced_accuracy, class_counts, epe, event_decisions, event_f1, mae, mean_euclidean, per_class_recall,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn ref_distance(p: &[Vec<f32>], t: &[Vec<f32>], group: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..p.len() {
        let points = p[i].len() / group;
        let mut s = 0.0;
        for j in 0..points {
            let mut sq = 0.0;
            for d in 0..group {
                let diff = p[i][j * group + d] as f64 - t[i][j * group + d] as f64;
                sq += diff * diff;
            }
            s += sq.sqrt();
        }
        sum += s / points as f64;
    }
    sum / p.len() as f64
}

pub fn ref_mae(p: &[Vec<f32>], t: &[Vec<f32>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..p.len() {
        for j in 0..p[i].len() {
            sum += (p[i][j] as f64 - t[i][j] as f64).abs();
            n += 1;
        }
    }
    sum / n as f64
}

pub fn ref_accuracy(p: &[usize], t: &[usize]) -> f64 {
    (0..p.len()).filter(|&i| p[i] == t[i]).count() as f64 / p.len() as f64
}

pub fn ref_balanced(p: &[usize], t: &[usize], classes: usize) -> f64 {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for i in 0..p.len() {
        confusion[t[i]][p[i]] += 1;
    }
    let mut recalls = Vec::new();
    for c in 0..classes {
        let row: usize = confusion[c].iter().sum();
        if row > 0 {
            recalls.push(confusion[c][c] as f64 / row as f64);
        }
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

pub fn ref_event_f1(probs: &[Vec<f32>], t: &[usize], threshold: f32, other: usize) -> f64 {
    let dec: Vec<usize> = probs
        .iter()
        .map(|r| {
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            if best != other && r[best] >= threshold {
                best
            } else {
                other
            }
        })
        .collect();
    let mut f1s = Vec::new();
    for c in 0..probs[0].len() {
        if c == other {
            continue;
        }
        let tp = (0..t.len()).filter(|&i| dec[i] == c && t[i] == c).count() as f64;
        let fp = (0..t.len()).filter(|&i| dec[i] == c && t[i] != c).count() as f64;
        let fn_ = (0..t.len()).filter(|&i| dec[i] != c && t[i] == c).count() as f64;
        if tp + fp + fn_ > 0.0 {
            f1s.push(2.0 * tp / (2.0 * tp + fp + fn_));
        }
    }
    if f1s.is_empty() {
        1.0
    } else {
        f1s.iter().sum::<f64>() / f1s.len() as f64
    }
}

pub fn rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
}

pub fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f32> {
    let raw: Vec<f32> = (0..k).map(|_| rng.random_range(0.01f32..1.0).powi(3)).collect();
    let s: f32 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: library {got} vs reference {want}"))
    }
}

/// Compares every metric with its reference on `n` random instances:
/// exact for counting metrics, within 1e-9 for real-valued ones.
pub fn compare_random_instances(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let len = rng.random_range(1..30);
        let points = rng.random_range(1..6);
        let (p2, t2) = (rows(&mut rng, len, 2 * points), rows(&mut rng, len, 2 * points));
        let (p3, t3) = (rows(&mut rng, len, 3 * points), rows(&mut rng, len, 3 * points));
        let got = mean_euclidean(&p2, &t2, 2).map_err(|e| e.to_string())?;
        close("mean_euclidean", got, ref_distance(&p2, &t2, 2), 1e-9)?;
        close("epe", epe(&p3, &t3).map_err(|e| e.to_string())?, ref_distance(&p3, &t3, 3), 1e-9)?;
        close("mae", mae(&p3, &t3).map_err(|e| e.to_string())?, ref_mae(&p3, &t3), 1e-9)?;

        let classes = rng.random_range(2..7);
        let p: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
        let t: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
        close("accuracy", accuracy(&p, &t).map_err(|e| e.to_string())?, ref_accuracy(&p, &t), 0.0)?;
        let ba = balanced_accuracy(&p, &t, classes).map_err(|e| e.to_string())?;
        close("balanced_accuracy", ba, ref_balanced(&p, &t, classes), 0.0)?;
        let recall = per_class_recall(&p, &t, classes).map_err(|e| e.to_string())?;
        for (c, r) in recall.iter().enumerate() {
            let support = t.iter().filter(|&&x| x == c).count();
            let hit = (0..len).filter(|&i| t[i] == c && p[i] == c).count();
            let want = (support > 0).then(|| hit as f64 / support as f64);
            if *r != want {
                return Err(format!("per_class_recall class {c}: {r:?} vs {want:?}"));
            }
        }

        let probs: Vec<Vec<f32>> = (0..len).map(|_| simplex(&mut rng, classes)).collect();
        let other = rng.random_range(0..classes);
        let threshold = rng.random_range(0.0f32..0.9);
        let got = event_f1(&probs, &t, threshold, other).map_err(|e| e.to_string())?;
        close("event_f1", got, ref_event_f1(&probs, &t, threshold, other), 0.0)?;
    }
    Ok(())
}

fn confident(class: usize, p: f32, k: usize) -> Vec<f32> {
    let rest = (1.0 - p) / (k - 1) as f32;
    (0..k).map(|c| if c == class { p } else { rest }).collect()
}

/// Event gating on six hand-labelled samples: classes 0 and 1 are events,
/// 2 is "other", threshold 0.6.
pub fn six_sample_table() -> Result<(), String> {
    let probs = vec![
        confident(0, 0.90, 3), // target 0: hit
        confident(0, 0.55, 3), // target 0: under threshold, missed
        confident(1, 0.70, 3), // target 0: wrong event
        confident(1, 0.95, 3), // target 1: hit
        confident(0, 0.80, 3), // target 2: false alarm
        confident(2, 0.90, 3), // target 1: missed
    ];
    let target = [0, 0, 0, 1, 2, 1];
    let dec = event_decisions(&probs, 0.6, 2).map_err(|e| e.to_string())?;
    if dec != [0, 2, 1, 1, 0, 2] {
        return Err(format!("decisions {dec:?}"));
    }
    let k = class_counts(&dec, &target, 3);
    let table: Vec<(usize, usize, usize)> = k.iter().map(|c| (c.tp, c.fp, c.fn_)).collect();
    if table[..2] != [(1, 1, 2), (1, 1, 1)] {
        return Err(format!("confusion counts {table:?}"));
    }
    // F1 of class 0 is 2/5, of class 1 is 2/4
    let f = event_f1(&probs, &target, 0.6, 2).map_err(|e| e.to_string())?;
    close("event_f1 table", f, 0.45, 1e-12)
}
