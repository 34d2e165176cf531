//! Ablation, few-shot and scaling harnesses.
//!
//! Every cell trains from scratch (or from a cloned checkpoint) and carries
//! its seed and dataset digests, so it can be rerun in isolation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::MergedModel;
use crate::checkpoint::{frozen_digest, Checkpoint};
use crate::dataset::records::samples_digest;
use crate::dataset::{
    apply_modality_ratio, fewshot_subset, gen_task_data, make_instruction_pairs, split_dataset, RatioLevel,
    SensorSample,
};
use crate::digest::mix_seed;
use crate::error::{Error, Result};
use crate::lm::{build_frozen_lm, LmPreset};
use crate::tasks::{find_task, registry_default, TaskSpec};
use crate::train::{evaluate, instruct_tune, mean_loss, pretrain_multitask, MetricReport, TrainConfig, Trainer};

/// Experiment settings; part of [`TrainConfig`] as its `[experiment]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Tasks trained and evaluated by the modality-ratio ablation.
    pub modality_tasks: Vec<String>,
    /// Task evaluated by the task-ratio ablation.
    pub probe_task: String,
    /// Held-out targets of the few-shot harness.
    pub fewshot_targets: Vec<String>,
    pub fewshot_k: Vec<usize>,
    pub adapt_steps: usize,
    /// Also instruction-tune every cell and evaluate the tuned model.
    pub evaluate_tuned: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            modality_tasks: vec!["gaze".into(), "activity".into()],
            probe_task: "gaze".into(),
            fewshot_targets: vec!["gaze".into(), "touch".into()],
            fewshot_k: vec![0, 5, 10, 20],
            adapt_steps: 200,
            evaluate_tuned: false,
        }
    }
}

pub const STAGE_PRETRAIN: &str = "pretrain";
pub const STAGE_TUNE: &str = "tune";
pub const STAGE_ADAPT: &str = "adapt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub level: String,
    pub seed: u64,
    pub stage: String,
    pub tasks: Vec<String>,
    pub reports: Vec<MetricReport>,
    /// `<split>/<task>` to the digest of the samples used.
    pub dataset_digests: BTreeMap<String, String>,
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub kind: String,
    pub axis: Vec<String>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl ExperimentResult {
    /// Stage used for comparisons: the tuned model when present.
    pub fn default_stage(&self) -> &str {
        if self.cells.iter().any(|c| c.stage == STAGE_TUNE) {
            STAGE_TUNE
        } else if self.cells.iter().any(|c| c.stage == STAGE_ADAPT) {
            STAGE_ADAPT
        } else {
            STAGE_PRETRAIN
        }
    }

    fn cells_at<'a>(&'a self, stage: &'a str, level: &'a str) -> impl Iterator<Item = &'a Cell> {
        self.cells.iter().filter(move |c| c.stage == stage && c.level == level)
    }

    /// Mean over seeds of the error of `task` at `level`.
    pub fn mean_error(&self, stage: &str, level: &str, task: &str) -> Option<f64> {
        mean(
            self.cells_at(stage, level)
                .flat_map(|c| c.reports.iter().filter(|r| r.task == task).map(|r| r.error)),
        )
    }

    pub fn mean_extra(&self, stage: &str, level: &str, key: &str) -> Option<f64> {
        mean(self.cells_at(stage, level).filter_map(|c| c.extra.get(key).copied()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            line: Some(e.line()),
            msg: format!("experiment result: {e}"),
        })
    }

    /// Plain-text grid: one row per (stage, level), one column per task
    /// error and extra value, averaged over seeds.
    pub fn table(&self) -> String {
        let mut tasks: Vec<&str> = Vec::new();
        let mut extras: Vec<&str> = Vec::new();
        let mut stages: Vec<&str> = Vec::new();
        for c in &self.cells {
            for r in &c.reports {
                if !tasks.contains(&r.task.as_str()) {
                    tasks.push(&r.task);
                }
            }
            for k in c.extra.keys() {
                if !extras.contains(&k.as_str()) {
                    extras.push(k);
                }
            }
            if !stages.contains(&c.stage.as_str()) {
                stages.push(&c.stage);
            }
        }
        let w = self.kind.len().max(8);
        let mut out = String::new();
        let _ = write!(out, "{:<10} {:<w$}", "stage", self.kind);
        for t in &tasks {
            let _ = write!(out, " {t:>12}");
        }
        for k in &extras {
            let _ = write!(out, " {k:>14}");
        }
        out.push('\n');
        for stage in &stages {
            for level in &self.axis {
                if self.cells_at(stage, level).next().is_none() {
                    continue;
                }
                let _ = write!(out, "{stage:<10} {level:<w$}");
                for t in &tasks {
                    match self.mean_error(stage, level, t) {
                        Some(e) => {
                            let _ = write!(out, " {e:>12.4}");
                        }
                        None => {
                            let _ = write!(out, " {:>12}", "-");
                        }
                    }
                }
                for k in &extras {
                    match self.mean_extra(stage, level, k) {
                        Some(v) => {
                            let _ = write!(out, " {v:>14.4}");
                        }
                        None => {
                            let _ = write!(out, " {:>14}", "-");
                        }
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Train/val/test splits of freshly generated data for `tasks`.
pub struct Splits {
    pub train: BTreeMap<String, Vec<SensorSample>>,
    pub val: BTreeMap<String, Vec<SensorSample>>,
    pub test: BTreeMap<String, Vec<SensorSample>>,
}

impl Splits {
    pub fn generate(specs: &[TaskSpec], cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut s = Splits {
            train: BTreeMap::new(),
            val: BTreeMap::new(),
            test: BTreeMap::new(),
        };
        for spec in specs {
            let data = gen_task_data(spec, cfg.samples_per_task, seed, cfg.noise_scale)?;
            let (tr, va, te) = split_dataset(&data, cfg.split, mix_seed(seed, 0x5b1u64))?;
            s.train.insert(spec.name.clone(), strip(tr));
            s.val.insert(spec.name.clone(), strip(va));
            s.test.insert(spec.name.clone(), strip(te));
        }
        Ok(s)
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        let mut d = BTreeMap::new();
        for (split, m) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for (task, samples) in m {
                d.insert(format!("{split}/{task}"), samples_digest(samples));
            }
        }
        d
    }
}

fn strip(mut samples: Vec<SensorSample>) -> Vec<SensorSample> {
    for s in samples.iter_mut() {
        s.latent = None;
    }
    samples
}

/// Resolves task names against the default registry; empty means all.
pub fn resolve_tasks(names: &[String]) -> Result<Vec<TaskSpec>> {
    let reg = registry_default();
    if names.is_empty() {
        return Ok(reg);
    }
    names.iter().map(|n| find_task(&reg, n).cloned()).collect()
}

/// Instruction and answer lines of `train` as a plain-text LM corpus.
pub fn instruction_corpus(specs: &[TaskSpec], train: &BTreeMap<String, Vec<SensorSample>>, seed: u64) -> Result<String> {
    let mut out = String::new();
    for spec in specs {
        if let Some(samples) = train.get(&spec.name) {
            for p in make_instruction_pairs(spec, samples, seed)? {
                out.push_str(&p.instruction);
                out.push(' ');
                out.push_str(&p.answer);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Model with a seeded frozen LM, stub-pretrained on `corpus` when the
/// config asks for it.
pub fn build_model(cfg: &TrainConfig, specs: &[TaskSpec], corpus: Option<&str>, seed: u64) -> Result<MergedModel> {
    let mc = cfg.model_config();
    let corpus = if cfg.lm_pretrain_steps > 0 { corpus } else { None };
    let lm = build_frozen_lm(&mc.lm, corpus, cfg.stub(), mix_seed(seed, 0x1a))?;
    MergedModel::new(mc, specs.to_vec(), lm, seed)
}

fn seeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.clone()
    }
}

/// Pretrains (and optionally tunes) one model and returns one cell per stage.
fn train_cells(
    cfg: &TrainConfig,
    specs: &[TaskSpec],
    train: &BTreeMap<String, Vec<SensorSample>>,
    test: &BTreeMap<String, Vec<SensorSample>>,
    level: &str,
    seed: u64,
    digests: BTreeMap<String, String>,
) -> Result<Vec<Cell>> {
    let cfg = seeded(cfg, seed);
    let corpus = instruction_corpus(specs, train, seed)?;
    let mut model = build_model(&cfg, specs, Some(&corpus), seed)?;
    pretrain_multitask(&mut model, train, &cfg, None)?;
    let tasks: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let cell = |stage: &str, model: &MergedModel| -> Result<Cell> {
        Ok(Cell {
            level: level.into(),
            seed,
            stage: stage.into(),
            tasks: tasks.clone(),
            reports: evaluate(model, test)?,
            dataset_digests: digests.clone(),
            extra: BTreeMap::new(),
        })
    };
    let mut cells = vec![cell(STAGE_PRETRAIN, &model)?];
    if cfg.experiment.evaluate_tuned && !cfg.direct_head {
        let mut pairs = BTreeMap::new();
        for spec in specs {
            pairs.insert(spec.name.clone(), make_instruction_pairs(spec, &train[&spec.name], seed)?);
        }
        instruct_tune(&mut model, &pairs, &cfg, None)?;
        cells.push(cell(STAGE_TUNE, &model)?);
    }
    Ok(cells)
}

fn check_levels<T>(levels: &[T]) -> Result<()> {
    if levels.len() < 2 {
        return Err(Error::Config("an ablation needs at least two levels".into()));
    }
    Ok(())
}

fn check_seeds(cfg: &TrainConfig) -> Result<()> {
    if cfg.experiment.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    cfg.validate()
}

/// One model per (level, seed), trained and evaluated on the modality tasks
/// with `apply_modality_ratio` applied to every split.
pub fn ablate_modality_ratio(cfg: &TrainConfig, levels: &[RatioLevel]) -> Result<ExperimentResult> {
    check_levels(levels)?;
    check_seeds(cfg)?;
    let specs = resolve_tasks(&cfg.experiment.modality_tasks)?;
    let mut cells = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let base = Splits::generate(&specs, cfg, seed)?;
        let digests = base.digests();
        for level in levels {
            let rseed = mix_seed(seed, 0x7a71);
            let reduce = |m: &BTreeMap<String, Vec<SensorSample>>| -> Result<BTreeMap<String, Vec<SensorSample>>> {
                m.iter()
                    .map(|(k, v)| Ok((k.clone(), apply_modality_ratio(v, *level, rseed)?)))
                    .collect()
            };
            let (train, test) = (reduce(&base.train)?, reduce(&base.test)?);
            cells.extend(train_cells(cfg, &specs, &train, &test, &level.label(), seed, digests.clone())?);
        }
    }
    Ok(ExperimentResult {
        kind: "modality_ratio".into(),
        axis: levels.iter().map(RatioLevel::label).collect(),
        seeds: cfg.experiment.seeds.clone(),
        cells,
    })
}

/// Number of co-trained tasks, probe included, at `level`.
pub fn task_count(level: RatioLevel, total: usize) -> usize {
    match level {
        RatioLevel::Single => 1,
        RatioLevel::Fraction(r) => ((r * total as f64).round() as usize).clamp(1, total),
    }
}

/// Probe first, then the other tasks in a seeded order; every level trains
/// on a prefix, so subsets are nested.
pub fn task_order(probe: &str, seed: u64) -> Result<Vec<TaskSpec>> {
    let reg = registry_default();
    let first = find_task(&reg, probe)?.clone();
    let mut rest: Vec<TaskSpec> = reg.into_iter().filter(|s| s.name != probe).collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7a5c)));
    Ok(std::iter::once(first).chain(rest).collect())
}

/// One model per (level, seed) co-trained on a growing task subset and
/// evaluated on the probe task.
pub fn ablate_task_ratio(cfg: &TrainConfig, levels: &[RatioLevel]) -> Result<ExperimentResult> {
    check_levels(levels)?;
    check_seeds(cfg)?;
    let probe = cfg.experiment.probe_task.clone();
    let mut cells = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let order = task_order(&probe, seed)?;
        let all = Splits::generate(&order, cfg, seed)?;
        for level in levels {
            let specs = &order[..task_count(*level, order.len())];
            let train: BTreeMap<String, Vec<SensorSample>> =
                specs.iter().map(|s| (s.name.clone(), all.train[&s.name].clone())).collect();
            let test: BTreeMap<String, Vec<SensorSample>> =
                [(probe.clone(), all.test[&probe].clone())].into_iter().collect();
            let digests = all
                .digests()
                .into_iter()
                .filter(|(k, _)| specs.iter().any(|s| k.ends_with(&format!("/{}", s.name))))
                .collect();
            cells.extend(train_cells(cfg, specs, &train, &test, &level.label(), seed, digests)?);
        }
    }
    Ok(ExperimentResult {
        kind: "task_ratio".into(),
        axis: levels.iter().map(RatioLevel::label).collect(),
        seeds: cfg.experiment.seeds.clone(),
        cells,
    })
}

/// Adapts clones of `source` to each held-out target for every k and seed.
/// k = 0 evaluates the freshly added zero head without any update. Also
/// returns the adapted model per target for the first seed and largest k.
pub fn fewshot_eval(source: &Checkpoint, cfg: &TrainConfig) -> Result<(ExperimentResult, BTreeMap<String, MergedModel>)> {
    check_seeds(cfg)?;
    let x = &cfg.experiment;
    let reg = registry_default();
    for t in &x.fewshot_targets {
        if source.header.tasks.iter().any(|s| &s.name == t) {
            return Err(Error::Config(format!("few-shot target {t} was part of pretraining")));
        }
    }
    let before = frozen_digest(&source.params);
    let k_max = x.fewshot_k.iter().copied().max().unwrap_or(0);
    let mut kept = BTreeMap::new();
    let mut cells = Vec::new();
    for &seed in &x.seeds {
        for target in &x.fewshot_targets {
            let spec = find_task(&reg, target)?.clone();
            let data = Splits::generate(std::slice::from_ref(&spec), cfg, seed)?;
            let train = &data.train[target];
            let test: BTreeMap<String, Vec<SensorSample>> = [(target.clone(), data.test[target].clone())].into();
            for &k in &x.fewshot_k {
                let mut model = source.model();
                model.add_task(spec.clone(), seed)?;
                let subset = fewshot_subset(&spec, train, k, mix_seed(seed, k as u64))?;
                if k > 0 {
                    let acfg = TrainConfig {
                        seed,
                        batch: cfg.batch.min(k),
                        ..cfg.clone()
                    };
                    let mut t = Trainer::new(&mut model, acfg, None)?;
                    t.adapt(target, &subset, x.adapt_steps)?;
                }
                if frozen_digest(&model.params) != before {
                    return Err(Error::Contract("few-shot adaptation touched the frozen LM".into()));
                }
                let mut digests = data.digests();
                digests.insert(format!("fewshot/{target}"), samples_digest(&subset));
                cells.push(Cell {
                    level: k.to_string(),
                    seed,
                    stage: STAGE_ADAPT.into(),
                    tasks: vec![target.clone()],
                    reports: evaluate(&model, &test)?,
                    dataset_digests: digests,
                    extra: BTreeMap::new(),
                });
                if seed == x.seeds[0] && k == k_max {
                    kept.insert(target.clone(), model);
                }
            }
        }
    }
    let result = ExperimentResult {
        kind: "fewshot".into(),
        axis: x.fewshot_k.iter().map(|k| k.to_string()).collect(),
        seeds: x.seeds.clone(),
        cells,
    };
    Ok((result, kept))
}

/// Pretrains a checkpoint on every configured task except the few-shot
/// targets.
pub fn fewshot_source(cfg: &TrainConfig, seed: u64) -> Result<Checkpoint> {
    let specs: Vec<TaskSpec> = resolve_tasks(&cfg.tasks)?
        .into_iter()
        .filter(|s| !cfg.experiment.fewshot_targets.contains(&s.name))
        .collect();
    if specs.is_empty() {
        return Err(Error::Config("no pretraining tasks left after removing the few-shot targets".into()));
    }
    let cfg = seeded(cfg, seed);
    let data = Splits::generate(&specs, &cfg, seed)?;
    let corpus = instruction_corpus(&specs, &data.train, seed)?;
    let mut model = build_model(&cfg, &specs, Some(&corpus), seed)?;
    let (opt, log) = pretrain_multitask(&mut model, &data.train, &cfg, None)?;
    Ok(Checkpoint::new(&model, &opt, &cfg, STAGE_PRETRAIN, &log.to_json()))
}

/// Trains every preset identically on all configured tasks; records
/// parameter counts and the mean validation loss.
pub fn scaling_run(cfg: &TrainConfig, presets: &[LmPreset]) -> Result<ExperimentResult> {
    check_seeds(cfg)?;
    if presets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("presets must be listed in increasing size".into()));
    }
    let specs = resolve_tasks(&cfg.tasks)?;
    let mut cells = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let data = Splits::generate(&specs, cfg, seed)?;
        let corpus = instruction_corpus(&specs, &data.train, seed)?;
        for &preset in presets {
            let pcfg = TrainConfig {
                preset,
                seed,
                ..cfg.clone()
            };
            let mut model = build_model(&pcfg, &specs, Some(&corpus), seed)?;
            pretrain_multitask(&mut model, &data.train, &pcfg, None)?;
            let mut extra = BTreeMap::new();
            extra.insert("params_total".into(), model.params.num_elements(None) as f64);
            extra.insert("params_trainable".into(), model.params.num_elements(Some(false)) as f64);
            let losses = data
                .val
                .iter()
                .map(|(t, v)| mean_loss(&model, t, v))
                .collect::<Result<Vec<f64>>>()?;
            extra.insert("val_loss".into(), losses.iter().sum::<f64>() / losses.len() as f64);
            cells.push(Cell {
                level: preset.name().into(),
                seed,
                stage: STAGE_PRETRAIN.into(),
                tasks: specs.iter().map(|s| s.name.clone()).collect(),
                reports: evaluate(&model, &data.test)?,
                dataset_digests: data.digests(),
                extra,
            });
        }
    }
    Ok(ExperimentResult {
        kind: "scaling".into(),
        axis: presets.iter().map(|p| p.name().to_string()).collect(),
        seeds: cfg.experiment.seeds.clone(),
        cells,
    })
}
