use std::collections::BTreeMap;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use iotlm::chat::ChatSession;
use iotlm::checkpoint::{frozen_digest, Checkpoint};
use iotlm::dataset::{
    apply_modality_ratio, gen_task_data, make_instruction_pairs, read_instructions, read_samples, split_dataset,
    write_instructions, write_samples, DatasetManifest, InstructionSample, RatioLevel, SensorSample,
    GENERATOR_VERSION,
};
use iotlm::diagnostics::{model_gradcheck, op_gradchecks};
use iotlm::digest::{file_digest, mix_seed};
use iotlm::experiments::{
    ablate_modality_ratio, ablate_task_ratio, build_model, fewshot_eval, fewshot_source, resolve_tasks, scaling_run,
    ExperimentResult,
};
use iotlm::lm::LmPreset;
use iotlm::nn::AdamState;
use iotlm::train::{evaluate, instruct_tune, pretrain_multitask, TrainConfig};
use iotlm::{Error, Result};

const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser)]
#[command(name = "iotlm", version, about = "Multisensory adapters over a frozen toy language model")]
struct Cli {
    /// Overrides the config seed (experiments use seed, seed+1, ...).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with TrainConfig fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/val/test records and instruction pairs.
    GenData,
    /// Multitask pretraining on a generated dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Instruction tuning from a checkpoint.
    Tune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Modality-ratio ablation.
    AblateModality {
        #[arg(long, default_value = "single,0.25,0.5,1")]
        levels: String,
    },
    /// Task-ratio ablation on the probe task.
    AblateTask {
        #[arg(long, default_value = "single,0.25,0.5,1")]
        levels: String,
    },
    /// Few-shot adaptation to held-out tasks.
    Fewshot {
        /// Source checkpoint; pretrained on the non-target tasks when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// LM size sweep.
    Scale {
        #[arg(long, default_value = "tiny,small,medium")]
        presets: String,
    },
    /// Question answering over sensor records.
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Replays lines from this file instead of reading stdin.
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Finite-difference checks of every op and the merged model.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        per_param: usize,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    seed: u64,
    config: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn new(out: &Path, command: &str, cfg: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io_at(out, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                seed: cfg.seed,
                config: cfg.to_toml(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest
            .inputs
            .insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io_at(&path, e))?;
        self.manifest.outputs.insert(name.into(), file_digest(&path)?);
        Ok(path)
    }

    fn finish(self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Io(e.to_string()))?;
        let path = self.out.join(RUN_MANIFEST);
        std::fs::write(&path, text + "\n").map_err(|e| Error::io_at(&path, e))?;
        Ok(())
    }
}

fn load_config(cli: &Cli, fallback: Option<&TrainConfig>) -> Result<TrainConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => TrainConfig::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io_at(p, e))?)?,
        (None, Some(c)) => c.clone(),
        (None, None) => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        let n = cfg.experiment.seeds.len() as u64;
        cfg.experiment.seeds = (s..s + n).collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn group(samples: Vec<SensorSample>) -> BTreeMap<String, Vec<SensorSample>> {
    let mut m: BTreeMap<String, Vec<SensorSample>> = BTreeMap::new();
    for s in samples {
        m.entry(s.task.clone()).or_default().push(s);
    }
    m
}

fn group_pairs(pairs: Vec<InstructionSample>) -> BTreeMap<String, Vec<InstructionSample>> {
    let mut m: BTreeMap<String, Vec<InstructionSample>> = BTreeMap::new();
    for p in pairs {
        m.entry(p.base.task.clone()).or_default().push(p);
    }
    m
}

/// Verifies the dataset manifest and returns the path of `file` inside `dir`.
fn data_file(run: &mut Run, dir: &Path, file: &str) -> Result<PathBuf> {
    let manifest = DatasetManifest::read(dir)?;
    manifest.verify(dir)?;
    let path = dir.join(file);
    if !manifest.digests.contains_key(file) {
        return Err(Error::Data(format!("{} is not listed in the dataset manifest", path.display())));
    }
    run.input(&path)?;
    Ok(path)
}

fn checkpoint(run: &mut Run, path: &Path) -> Result<Checkpoint> {
    run.input(path)?;
    Checkpoint::load(path)
}

fn gen_data(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli, None)?;
    let specs = resolve_tasks(&cfg.tasks)?;
    let ratio = cfg.modality_ratio()?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io_at(&cli.out, e))?;
    let mut splits: [Vec<SensorSample>; 3] = Default::default();
    for spec in &specs {
        let data = gen_task_data(spec, cfg.samples_per_task, cfg.seed, cfg.noise_scale)?;
        let (tr, va, te) = split_dataset(&data, cfg.split, mix_seed(cfg.seed, 0x5b1))?;
        for (i, part) in [tr, va, te].into_iter().enumerate() {
            splits[i].extend(apply_modality_ratio(&part, ratio, mix_seed(cfg.seed, 0x7a71))?);
        }
    }
    let mut manifest = DatasetManifest {
        tasks: specs.iter().map(|s| s.name.clone()).collect(),
        generator_version: GENERATOR_VERSION,
        seed: cfg.seed,
        noise_scale: cfg.noise_scale,
        modality_ratio: Some(ratio.label()),
        config: cfg.to_toml(),
        ..Default::default()
    };
    for (name, samples) in ["train", "val", "test"].into_iter().zip(&splits) {
        let file = format!("{name}.jsonl");
        manifest.digests.insert(file.clone(), write_samples(&cli.out.join(&file), samples)?);
        manifest.counts.insert(file, samples.len());
        let mut pairs = Vec::new();
        for spec in &specs {
            let mine: Vec<SensorSample> = samples.iter().filter(|s| s.task == spec.name).cloned().collect();
            if !mine.is_empty() {
                pairs.extend(make_instruction_pairs(spec, &mine, cfg.seed)?);
            }
        }
        let file = format!("{name}_instruct.jsonl");
        manifest.digests.insert(file.clone(), write_instructions(&cli.out.join(&file), &pairs)?);
        manifest.counts.insert(file, pairs.len());
    }
    manifest.write(&cli.out)?;
    for (file, n) in &manifest.counts {
        println!("{file}: {n} records");
    }
    Ok(())
}

fn corpus(pairs: &BTreeMap<String, Vec<InstructionSample>>) -> String {
    let mut out = String::new();
    for p in pairs.values().flatten() {
        out.push_str(&p.instruction);
        out.push(' ');
        out.push_str(&p.answer);
        out.push('\n');
    }
    out
}

fn print_log(log: &iotlm::train::TrainLog) {
    if let Some(last) = log.epoch_loss.last() {
        let parts: Vec<String> = last.iter().map(|(t, l)| format!("{t}={l:.4}")).collect();
        println!("final epoch loss: {}", parts.join(" "));
    }
    println!("optimizer steps: {}", log.steps);
}

fn pretrain(cli: &Cli, data: &Path) -> Result<()> {
    let cfg = load_config(cli, None)?;
    let mut run = Run::new(&cli.out, "pretrain", &cfg)?;
    let mut train = group(read_samples(&data_file(&mut run, data, "train.jsonl")?, false)?);
    if !cfg.tasks.is_empty() {
        for t in &cfg.tasks {
            if !train.contains_key(t) {
                return Err(Error::Data(format!("no training data for task {t}")));
            }
        }
        train.retain(|t, _| cfg.tasks.contains(t));
    }
    let names: Vec<String> = train.keys().cloned().collect();
    let specs = resolve_tasks(&names)?;
    let text = if cfg.lm_pretrain_steps > 0 {
        let pairs = group_pairs(read_instructions(&data_file(&mut run, data, "train_instruct.jsonl")?, false)?);
        Some(corpus(&pairs))
    } else {
        None
    };
    let mut model = build_model(&cfg, &specs, text.as_deref(), cfg.seed)?;
    let init = Checkpoint::new(&model, &AdamState::new(cfg.adam()), &cfg, "init", "");
    run.write("init.ckpt", &init.to_bytes())?;
    let (opt, log) = pretrain_multitask(&mut model, &train, &cfg, None)?;
    let log_json = log.to_json();
    run.write("pretrain_log.json", log_json.as_bytes())?;
    let ckpt = Checkpoint::new(&model, &opt, &cfg, "pretrain", &log_json);
    let path = run.write("pretrain.ckpt", &ckpt.to_bytes())?;
    print_log(&log);
    println!("checkpoint: {}", path.display());
    run.finish()
}

fn tune(cli: &Cli, data: &Path, ckpt_path: &Path) -> Result<()> {
    let mut run_cfg = TrainConfig::default();
    let mut run = Run::new(&cli.out, "tune", &run_cfg)?;
    let src = checkpoint(&mut run, ckpt_path)?;
    run_cfg = load_config(cli, Some(&src.header.train))?;
    run.manifest.seed = run_cfg.seed;
    run.manifest.config = run_cfg.to_toml();
    let mut pairs = group_pairs(read_instructions(&data_file(&mut run, data, "train_instruct.jsonl")?, false)?);
    let mut model = src.model();
    pairs.retain(|t, _| model.task(t).is_ok());
    if pairs.is_empty() {
        return Err(Error::Data("no instruction pairs for the checkpoint's tasks".into()));
    }
    let cfg = TrainConfig {
        epochs: run_cfg.tune_epochs,
        ..run_cfg.clone()
    };
    let (opt, log) = instruct_tune(&mut model, &pairs, &cfg, None)?;
    let log_json = log.to_json();
    run.write("tune_log.json", log_json.as_bytes())?;
    let ckpt = Checkpoint::new(&model, &opt, &run_cfg, "tune", &log_json);
    let path = run.write("tune.ckpt", &ckpt.to_bytes())?;
    print_log(&log);
    println!("checkpoint: {}", path.display());
    run.finish()
}

fn eval(cli: &Cli, data: &Path, ckpt_path: &Path, split: &str) -> Result<()> {
    let mut run = Run::new(&cli.out, "eval", &TrainConfig::default())?;
    let src = checkpoint(&mut run, ckpt_path)?;
    let cfg = load_config(cli, Some(&src.header.train))?;
    run.manifest.seed = cfg.seed;
    run.manifest.config = cfg.to_toml();
    let samples = group(read_samples(&data_file(&mut run, data, &format!("{split}.jsonl"))?, false)?);
    let model = src.model();
    if let Some(t) = samples.keys().find(|t| model.task(t).is_err()) {
        return Err(Error::Config(format!("dataset task {t} is not in the checkpoint")));
    }
    let reports = evaluate(&model, &samples)?;
    let mut lines = String::new();
    for r in &reports {
        lines.push_str(&r.to_json_line());
        lines.push('\n');
        println!("{:<9} {:<15} {:>10.4} {}", r.task, r.metric, r.value, r.units);
    }
    run.write("report.jsonl", lines.as_bytes())?;
    run.finish()
}

fn parse_levels(s: &str) -> Result<Vec<RatioLevel>> {
    s.split(',').map(|l| RatioLevel::parse(l.trim())).collect()
}

fn write_result(run: &mut Run, result: &ExperimentResult) -> Result<()> {
    run.write("result.json", result.to_json().as_bytes())?;
    let table = result.table();
    run.write("table.txt", table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn ablate(cli: &Cli, levels: &str, by_task: bool) -> Result<()> {
    let cfg = load_config(cli, None)?;
    let levels = parse_levels(levels)?;
    let mut run = Run::new(&cli.out, if by_task { "ablate-task" } else { "ablate-modality" }, &cfg)?;
    let result = if by_task {
        ablate_task_ratio(&cfg, &levels)?
    } else {
        ablate_modality_ratio(&cfg, &levels)?
    };
    write_result(&mut run, &result)?;
    run.finish()
}

fn fewshot(cli: &Cli, ckpt_path: Option<&Path>) -> Result<()> {
    let mut run = Run::new(&cli.out, "fewshot", &TrainConfig::default())?;
    let src = match ckpt_path {
        Some(p) => Some(checkpoint(&mut run, p)?),
        None => None,
    };
    let cfg = load_config(cli, src.as_ref().map(|c| &c.header.train))?;
    run.manifest.seed = cfg.seed;
    run.manifest.config = cfg.to_toml();
    let src = match src {
        Some(c) => c,
        None => {
            let c = fewshot_source(&cfg, cfg.seed)?;
            run.write("fewshot_source.ckpt", &c.to_bytes())?;
            c
        }
    };
    let (result, adapted) = fewshot_eval(&src, &cfg)?;
    write_result(&mut run, &result)?;
    for (target, model) in adapted {
        let ckpt = Checkpoint::new(&model, &AdamState::new(cfg.adam()), &cfg, "fewshot", "");
        debug_assert_eq!(frozen_digest(&ckpt.params), src.header.frozen_digest);
        run.write(&format!("fewshot_{target}.ckpt"), &ckpt.to_bytes())?;
    }
    run.finish()
}

fn scale(cli: &Cli, presets: &str) -> Result<()> {
    let cfg = load_config(cli, None)?;
    let presets = presets
        .split(',')
        .map(|p| LmPreset::parse(p.trim()))
        .collect::<Result<Vec<_>>>()?;
    let mut run = Run::new(&cli.out, "scale", &cfg)?;
    let result = scaling_run(&cfg, &presets)?;
    write_result(&mut run, &result)?;
    run.finish()
}

fn chat(ckpt_path: &Path, script: Option<&Path>) -> Result<()> {
    let model = Checkpoint::load(ckpt_path)?.model();
    let mut session = ChatSession::new(&model);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match script {
        Some(p) => session.run(BufReader::new(std::fs::File::open(p).map_err(|e| Error::io_at(p, e))?), &mut out, false),
        None => {
            writeln!(out, "{}", iotlm::chat::HELP.trim_end())?;
            write!(out, "> ")?;
            out.flush()?;
            session.run(io::stdin().lock(), &mut out, true)
        }
    }
}

fn gradcheck(per_param: usize, seed: u64) -> Result<bool> {
    let start = Instant::now();
    let mut reports = op_gradchecks(seed)?;
    reports.extend(model_gradcheck(seed, per_param)?);
    let mut ok = true;
    for (name, r) in &reports {
        println!(
            "{:<24} {} max_rel_err {:.2e} coords {}",
            name,
            if r.passed { "pass" } else { "FAIL" },
            r.max_rel_err,
            r.coords_checked
        );
        ok &= r.passed;
    }
    println!("{} checks in {:.1}s", reports.len(), start.elapsed().as_secs_f64());
    Ok(ok)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData => gen_data(cli),
        Cmd::Pretrain { data } => pretrain(cli, data),
        Cmd::Tune { data, checkpoint } => tune(cli, data, checkpoint),
        Cmd::Eval {
            data,
            checkpoint,
            split,
        } => eval(cli, data, checkpoint, split),
        Cmd::AblateModality { levels } => ablate(cli, levels, false),
        Cmd::AblateTask { levels } => ablate(cli, levels, true),
        Cmd::Fewshot { checkpoint } => fewshot(cli, checkpoint.as_deref()),
        Cmd::Scale { presets } => scale(cli, presets),
        Cmd::Chat { checkpoint, script } => chat(checkpoint, script.as_deref()),
        Cmd::Gradcheck { per_param } => {
            if gradcheck(*per_param, cli.seed.unwrap_or(0))? {
                Ok(())
            } else {
                Err(Error::Numeric("gradient check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
