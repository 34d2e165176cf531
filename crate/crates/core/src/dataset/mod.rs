//! Synthetic samples, instruction pairs, the record format and subsetting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ModalityKind, Payload};
use crate::error::{Error, Result};
use crate::tasks::{Label, TaskSpec};

pub mod generators;
pub mod instruct;
pub mod oracle;
pub mod records;

pub use generators::{gen_task_data, GENERATOR_VERSION};
pub use instruct::{make_instruction_pairs, InstructionSample};
pub use records::{read_instructions, read_samples, write_instructions, write_samples, DatasetManifest};

/// One multimodal record. `latent` is the generator state behind the sample;
/// models never read it.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSample {
    pub sample_id: u64,
    pub task_id: usize,
    pub task: String,
    pub payloads: BTreeMap<ModalityKind, Payload>,
    pub label: Label,
    pub latent: Option<Vec<f32>>,
}

impl SensorSample {
    pub fn validate(&self, spec: &TaskSpec) -> Result<()> {
        if self.task != spec.name {
            return Err(Error::Data(format!("sample {} belongs to {}, not {}", self.sample_id, self.task, spec.name)));
        }
        if let Some(k) = self.payloads.keys().find(|k| !spec.modalities.contains(k)) {
            return Err(Error::Data(format!("sample {} carries {k}, not an input of {}", self.sample_id, spec.name)));
        }
        for p in self.payloads.values() {
            p.validate()?;
        }
        spec.check_label(&self.label)
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Seeded shuffle cut into train/val/test by `fractions`.
pub fn split_dataset<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n = items.len();
    let idx = shuffled(n, seed);
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    Ok((
        pick(items, &idx[..n_train]),
        pick(items, &idx[n_train..n_train + n_val]),
        pick(items, &idx[n_train + n_val..]),
    ))
}

/// `k` training samples: round-robin over classes for classification tasks,
/// a uniform draw otherwise.
pub fn fewshot_subset(spec: &TaskSpec, train: &[SensorSample], k: usize, seed: u64) -> Result<Vec<SensorSample>> {
    if k > train.len() {
        return Err(Error::Config(format!("k = {k} exceeds {} training samples", train.len())));
    }
    let idx = shuffled(train.len(), seed);
    if !spec.head.is_classification() {
        return Ok(pick(train, &idx[..k]));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &idx {
        match train[i].label {
            Label::Class(c) => by_class.entry(c).or_default().push(i),
            Label::Values(_) => return Err(Error::Data(format!("value label in classification task {}", spec.name))),
        }
    }
    let mut queues: Vec<std::vec::IntoIter<usize>> = by_class.into_values().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        for q in queues.iter_mut() {
            if out.len() == k {
                break;
            }
            if let Some(i) = q.next() {
                out.push(train[i].clone());
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioLevel {
    /// Every sample keeps only its canonical-first modality.
    Single,
    /// Fraction of samples keeping all modalities.
    Fraction(f64),
}

impl RatioLevel {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "single" {
            return Ok(RatioLevel::Single);
        }
        let r: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("ratio {s:?} is neither `single` nor a number")))?;
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("ratio {r} outside [0, 1]")));
        }
        Ok(RatioLevel::Fraction(r))
    }

    pub fn label(&self) -> String {
        match self {
            RatioLevel::Single => "single".into(),
            RatioLevel::Fraction(r) => format!("{r}"),
        }
    }
}

/// Keeps only the canonical-first modality on a seeded `1 - ratio` share of
/// samples (all of them for [`RatioLevel::Single`]).
pub fn apply_modality_ratio(samples: &[SensorSample], ratio: RatioLevel, seed: u64) -> Result<Vec<SensorSample>> {
    let n = samples.len();
    let reduced = match ratio {
        RatioLevel::Single => n,
        RatioLevel::Fraction(r) if (0.0..=1.0).contains(&r) => ((1.0 - r) * n as f64).round() as usize,
        RatioLevel::Fraction(r) => return Err(Error::Config(format!("ratio {r} outside [0, 1]"))),
    };
    let mut out = samples.to_vec();
    for &i in &shuffled(n, seed)[..reduced] {
        let p = &mut out[i].payloads;
        if let Some(&first) = p.keys().next() {
            p.retain(|&k, _| k == first);
        }
    }
    Ok(out)
}
