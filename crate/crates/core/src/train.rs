//! Multitask pretraining, instruction tuning, adaptation and evaluation.
//!
//! Every step draws one batch of a single task; tasks are interleaved
//! round-robin within an epoch. Only non-`lm.*` parameters are updated.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{merged_forward, InsertionMode, MergedModel, ModelConfig};
use crate::autodiff::{Graph, Tensor};
use crate::dataset::{InstructionSample, RatioLevel, SensorSample};
use crate::digest::mix_seed;
use crate::encoders::ModalityKind;
use crate::experiments::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lm::{LMConfig, LmPreset, StubPretrain, PAD};
use crate::metrics;
use crate::nn::{AdamConfig, AdamState, Grads};
use crate::tasks::{compute_metric, decode_head, task_loss, Label, MetricKind, Prediction, TaskSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    /// Plain sum of task losses.
    #[default]
    Uniform,
    /// Each task's gradient is rescaled towards the running mean norm.
    GradNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    pub balance: Balance,
    /// Empty means every registered task.
    pub tasks: Vec<String>,
    /// `"single"` or a fraction in `[0, 1]`.
    pub modality_ratio: String,
    pub preset: LmPreset,
    pub insertion: InsertionMode,
    pub direct_head: bool,
    pub prefix_len: usize,
    /// Weights of the text and head losses during instruction tuning.
    pub text_weight: f32,
    pub head_weight: f32,
    /// Generated samples per task and split fractions used by the CLI.
    pub samples_per_task: usize,
    pub split: [f64; 3],
    pub noise_scale: f32,
    /// Stub pretraining of the LM on the instruction corpus; 0 skips it.
    pub lm_pretrain_steps: usize,
    /// Epochs of instruction tuning.
    pub tune_epochs: usize,
    pub experiment: ExperimentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-4,
            batch: 16,
            seed: 0,
            balance: Balance::Uniform,
            tasks: Vec::new(),
            modality_ratio: "1".into(),
            preset: LmPreset::Tiny,
            insertion: InsertionMode::InputPrefix,
            direct_head: false,
            prefix_len: 16,
            text_weight: 1.0,
            head_weight: 1.0,
            samples_per_task: 200,
            split: [0.8, 0.1, 0.1],
            noise_scale: 1.0,
            lm_pretrain_steps: 0,
            tune_epochs: 30,
            experiment: ExperimentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Optimiser settings of the non-LM baselines.
    pub fn baseline() -> Self {
        Self {
            lr: 1e-3,
            batch: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.tune_epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        self.modality_ratio()?;
        Ok(())
    }

    pub fn modality_ratio(&self) -> Result<RatioLevel> {
        RatioLevel::parse(&self.modality_ratio)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(LMConfig::preset(self.preset));
        m.adapter.prefix_len = self.prefix_len;
        m.adapter.insertion = self.insertion;
        if self.insertion == InsertionMode::PerLayerPrefix {
            m.adapter.layers = (0..m.lm.layers).collect();
        }
        m.direct_head = self.direct_head;
        m
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn stub(&self) -> StubPretrain {
        StubPretrain {
            steps: self.lm_pretrain_steps,
            ..StubPretrain::default()
        }
    }
}

/// Per-epoch mean loss and mean effective gradient norm per task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<BTreeMap<String, f64>>,
    pub epoch_grad_norm: Vec<BTreeMap<String, f64>>,
    pub steps: u64,
}

impl TrainLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log serialises")
    }

    pub fn final_loss(&self, task: &str) -> Option<f64> {
        self.epoch_loss.last().and_then(|e| e.get(task).copied())
    }
}

/// One training example: sensor-only or with instruction text.
#[derive(Clone, Copy, Debug)]
pub enum Example<'a> {
    Sensor(&'a SensorSample),
    Instruct(&'a InstructionSample),
}

impl Example<'_> {
    fn sample(&self) -> &SensorSample {
        match self {
            Example::Sensor(s) => s,
            Example::Instruct(i) => &i.base,
        }
    }
}

/// Input ids and next-token targets for an instruction pair; only answer
/// tokens and the end marker are supervised.
pub fn text_targets(pair: &InstructionSample) -> (Vec<usize>, Vec<usize>) {
    let (ids, start) = pair.token_ids();
    let inputs = ids[..ids.len() - 1].to_vec();
    let targets = (1..ids.len()).map(|i| if i >= start { ids[i] } else { PAD }).collect();
    (inputs, targets)
}

fn example_loss(g: &mut Graph<f32>, model: &MergedModel, ex: Example, spec: &TaskSpec, weights: (f32, f32)) -> Result<Tensor> {
    let s = ex.sample();
    match ex {
        Example::Sensor(_) => {
            let out = merged_forward(g, model, &s.payloads, &spec.name, None)?;
            task_loss(g, spec, out.head_out, &s.label)
        }
        Example::Instruct(pair) => {
            let (inputs, targets) = text_targets(pair);
            let out = merged_forward(g, model, &s.payloads, &spec.name, Some(&inputs))?;
            let logits = out
                .logits
                .ok_or_else(|| Error::Config("instruction tuning needs the LM text path".into()))?;
            let text = g.cross_entropy(logits, &targets, PAD)?;
            let head = task_loss(g, spec, out.head_out, &s.label)?;
            let text = g.scale(text, weights.0);
            let head = g.scale(head, weights.1);
            g.add(text, head)
        }
    }
}

fn grad_norm(grads: &Grads) -> f64 {
    grads
        .values()
        .flat_map(|v| v.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Running per-task gradient norms for [`Balance::GradNorm`].
#[derive(Clone, Debug, Default)]
struct NormTracker {
    ema: BTreeMap<String, f64>,
}

impl NormTracker {
    const DECAY: f64 = 0.9;

    /// Records a raw norm and returns the factor that brings it to the running
    /// mean over tasks.
    fn scale(&mut self, task: &str, norm: f64) -> f64 {
        let e = self.ema.entry(task.to_string()).or_insert(norm);
        *e = Self::DECAY * *e + (1.0 - Self::DECAY) * norm;
        let mean = self.ema.values().sum::<f64>() / self.ema.len() as f64;
        if norm > 0.0 {
            (mean / norm).clamp(0.1, 10.0)
        } else {
            1.0
        }
    }
}

/// Stateful trainer over one model.
pub struct Trainer<'m> {
    pub model: &'m mut MergedModel,
    pub opt: AdamState,
    pub config: TrainConfig,
    norms: NormTracker,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut MergedModel, config: TrainConfig, opt: Option<AdamState>) -> Result<Self> {
        config.validate()?;
        let opt = opt.unwrap_or_else(|| AdamState::new(config.adam()));
        Ok(Self {
            model,
            opt,
            config,
            norms: NormTracker::default(),
        })
    }

    /// One optimiser step on a single-task batch. Returns the mean loss and
    /// the gradient norm after balancing.
    pub fn step(&mut self, task: &str, batch: &[Example]) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let spec = self.model.task(task)?.clone();
        let mut g = Graph::<f32>::new();
        let w = (self.config.text_weight, self.config.head_weight);
        let losses = batch
            .iter()
            .map(|&ex| example_loss(&mut g, self.model, ex, &spec, w))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&losses)?;
        let total = g.sum(stacked);
        let loss = g.scale(total, 1.0 / batch.len() as f32);
        let value = g.item(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on task {task} at step {}", self.opt.step + 1)));
        }
        g.backward(loss)?;
        let mut grads = self.model.params.grads_from(&g);
        let raw = grad_norm(&grads);
        let mut norm = raw;
        if self.config.balance == Balance::GradNorm {
            let s = self.norms.scale(task, raw);
            for v in grads.values_mut() {
                for x in v.iter_mut() {
                    *x *= s as f32;
                }
            }
            norm = raw * s;
        }
        self.opt.update(&mut self.model.params, &grads)?;
        Ok((value, norm))
    }

    /// Epoch loop with per-task shuffled batches interleaved round-robin.
    pub fn run<'a>(&mut self, data: &BTreeMap<String, Vec<Example<'a>>>) -> Result<TrainLog> {
        for (task, exs) in data {
            self.model.task(task)?;
            if exs.is_empty() {
                return Err(Error::Data(format!("no training data for task {task}")));
            }
        }
        let mut log = TrainLog::default();
        for epoch in 0..self.config.epochs {
            let mut batches: Vec<(&String, Vec<Vec<Example>>)> = Vec::new();
            for (t, (task, exs)) in data.iter().enumerate() {
                let mut order: Vec<usize> = (0..exs.len()).collect();
                let seed = mix_seed(mix_seed(self.config.seed, epoch as u64), t as u64);
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let chunks = order
                    .chunks(self.config.batch)
                    .map(|c| c.iter().map(|&i| exs[i]).collect())
                    .collect();
                batches.push((task, chunks));
            }
            let rounds = batches.iter().map(|b| b.1.len()).max().unwrap_or(0);
            let mut sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
            for j in 0..rounds {
                for (task, chunks) in &batches {
                    if let Some(batch) = chunks.get(j) {
                        let (l, n) = self.step(task, batch)?;
                        let e = sums.entry(task.to_string()).or_default();
                        e.0 += l;
                        e.1 += n;
                        e.2 += 1;
                    }
                }
            }
            log.epoch_loss
                .push(sums.iter().map(|(k, v)| (k.clone(), v.0 / v.2 as f64)).collect());
            log.epoch_grad_norm
                .push(sums.iter().map(|(k, v)| (k.clone(), v.1 / v.2 as f64)).collect());
        }
        log.steps = self.opt.step;
        Ok(log)
    }

    /// Fixed number of steps cycling through `samples` of one task.
    pub fn adapt(&mut self, task: &str, samples: &[SensorSample], steps: usize) -> Result<()> {
        if samples.is_empty() {
            return Ok(());
        }
        let exs: Vec<Example> = samples.iter().map(Example::Sensor).collect();
        let b = self.config.batch.min(exs.len());
        let mut order: Vec<usize> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, 0xada7));
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(b);
            while batch.len() < b {
                if order.is_empty() {
                    order = (0..exs.len()).collect();
                    order.shuffle(&mut rng);
                }
                batch.push(exs[order.pop().expect("refilled")]);
            }
            self.step(task, &batch)?;
        }
        Ok(())
    }
}

/// Trains on sensor samples with the multitask objective.
pub fn pretrain_multitask(
    model: &mut MergedModel,
    data: &BTreeMap<String, Vec<SensorSample>>,
    config: &TrainConfig,
    opt: Option<AdamState>,
) -> Result<(AdamState, TrainLog)> {
    let exs = data
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().map(Example::Sensor).collect()))
        .collect();
    let mut t = Trainer::new(model, config.clone(), opt)?;
    let log = t.run(&exs)?;
    Ok((t.opt, log))
}

/// Trains on instruction pairs: text loss on the answer plus the head loss.
pub fn instruct_tune(
    model: &mut MergedModel,
    data: &BTreeMap<String, Vec<InstructionSample>>,
    config: &TrainConfig,
    opt: Option<AdamState>,
) -> Result<(AdamState, TrainLog)> {
    if model.config.direct_head {
        return Err(Error::Config("instruction tuning needs the LM text path".into()));
    }
    let exs = data
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().map(Example::Instruct).collect()))
        .collect();
    let mut t = Trainer::new(model, config.clone(), opt)?;
    let log = t.run(&exs)?;
    Ok((t.opt, log))
}

/// Head prediction and gate weights for one sample.
pub fn predict(model: &MergedModel, sample: &SensorSample, task: &str) -> Result<(Prediction, Vec<(ModalityKind, f32)>)> {
    let spec = model.task(task)?;
    let mut g = Graph::<f32>::new();
    let out = merged_forward(&mut g, model, &sample.payloads, task, None)?;
    let pred = decode_head(spec, g.data(out.head_out));
    let gates = out.kinds.iter().copied().zip(g.data(out.gate_weights).iter().copied()).collect();
    Ok((pred, gates))
}

/// Mean task loss (normalised units) over `samples`, without updates.
pub fn mean_loss(model: &MergedModel, task: &str, samples: &[SensorSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data(format!("no samples for task {task}")));
    }
    let spec = model.task(task)?;
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::<f32>::new();
        let out = merged_forward(&mut g, model, &s.payloads, task, None)?;
        let l = task_loss(&mut g, spec, out.head_out, &s.label)?;
        total += g.item(l) as f64;
    }
    Ok(total / samples.len() as f64)
}

/// One evaluation record per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_id: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
    /// Error form of `value` (lower is better).
    pub error: f64,
    pub units: String,
    pub samples: usize,
    pub per_class: Option<Vec<Option<f64>>>,
    /// Mean gate weight per modality name.
    pub gate_weights: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

/// Metric of `spec` on `samples` from precomputed predictions.
pub fn report_from_predictions(
    spec: &TaskSpec,
    preds: &[Prediction],
    labels: &[Label],
    gate_weights: BTreeMap<String, f64>,
) -> Result<MetricReport> {
    let value = compute_metric(spec, preds, labels)?;
    let per_class = if spec.head.is_classification() {
        let p: Vec<usize> = preds
            .iter()
            .map(|p| match p {
                Prediction::Class { id, .. } => *id,
                Prediction::Values(_) => usize::MAX,
            })
            .collect();
        let t: Vec<usize> = labels
            .iter()
            .map(|l| match l {
                Label::Class(c) => *c,
                Label::Values(_) => usize::MAX,
            })
            .collect();
        Some(metrics::per_class_recall(&p, &t, spec.out_dim())?)
    } else {
        None
    };
    if !value.is_finite() {
        return Err(Error::Numeric(format!("metric for {} is not finite", spec.name)));
    }
    Ok(MetricReport {
        task_id: spec.id,
        task: spec.name.clone(),
        metric: spec.metric.name().into(),
        value,
        error: spec.metric.error(value),
        units: match spec.metric {
            MetricKind::MeanEuclidean { .. } | MetricKind::Mae | MetricKind::Epe => spec.units.clone(),
            _ => "fraction".into(),
        },
        samples: preds.len(),
        per_class,
        gate_weights,
    })
}

/// Deterministic evaluation of every task in `data`.
pub fn evaluate(model: &MergedModel, data: &BTreeMap<String, Vec<SensorSample>>) -> Result<Vec<MetricReport>> {
    data.iter()
        .map(|(task, samples)| {
            let spec = model.task(task)?;
            if samples.is_empty() {
                return Err(Error::Data(format!("no evaluation samples for task {task}")));
            }
            let mut preds = Vec::with_capacity(samples.len());
            let mut gate_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for s in samples {
                let (p, gates) = predict(model, s, task)?;
                preds.push(p);
                for (k, w) in gates {
                    let e = gate_sum.entry(k.name().to_string()).or_default();
                    e.0 += w as f64;
                    e.1 += 1;
                }
            }
            let labels: Vec<Label> = samples.iter().map(|s| s.label.clone()).collect();
            let gates = gate_sum.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
            report_from_predictions(spec, &preds, &labels, gates)
        })
        .collect()
}
