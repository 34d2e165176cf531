//! Line-delimited JSON records and dataset manifests.
//!
//! One record per `\n`-terminated line:
//! `{"sample_id", "task_id", "task", "payloads": {kind: {"shape", "sample_rate"?,
//! "units"?, "values"}}, "label", "latent"?, "instruction"?, "answer"?, "options"?}`.
//! Reals are written in their shortest round-trip decimal form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::{file_digest, fnv1a64_hex};
use crate::encoders::{GridPayload, ModalityKind, Payload, SeqPayload};
use crate::error::{Error, Result};
use crate::tasks::Label;

use super::{InstructionSample, SensorSample};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PayloadRecord {
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sample_rate: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    units: Option<String>,
    values: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    sample_id: u64,
    task_id: usize,
    task: String,
    payloads: BTreeMap<String, PayloadRecord>,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latent: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<String>>,
}

fn to_record(s: &SensorSample) -> Record {
    let payloads = s
        .payloads
        .iter()
        .map(|(k, p)| {
            let rec = match p {
                Payload::Grid(g) => PayloadRecord {
                    shape: vec![g.height, g.width, g.channels],
                    sample_rate: None,
                    units: Some(g.units.clone()),
                    values: g.values.clone(),
                },
                Payload::Seq(q) => PayloadRecord {
                    shape: vec![q.steps, q.channels],
                    sample_rate: Some(q.sample_rate_hz),
                    units: None,
                    values: q.values.clone(),
                },
            };
            (k.name().to_string(), rec)
        })
        .collect();
    Record {
        sample_id: s.sample_id,
        task_id: s.task_id,
        task: s.task.clone(),
        payloads,
        label: s.label.clone(),
        latent: s.latent.clone(),
        instruction: None,
        answer: None,
        options: None,
    }
}

fn from_record(r: Record, keep_latent: bool) -> std::result::Result<(SensorSample, Option<(String, String, Option<Vec<String>>)>), String> {
    let mut payloads = BTreeMap::new();
    for (name, p) in r.payloads {
        let kind = ModalityKind::parse(&name).map_err(|e| e.to_string())?;
        let payload = match p.shape[..] {
            [height, width, channels] => Payload::Grid(GridPayload {
                height,
                width,
                channels,
                values: p.values,
                units: p.units.unwrap_or_default(),
            }),
            [steps, channels] => Payload::Seq(SeqPayload {
                steps,
                channels,
                sample_rate_hz: p.sample_rate.ok_or(format!("{name} payload lacks sample_rate"))?,
                values: p.values,
            }),
            _ => return Err(format!("{name} payload has rank-{} shape", p.shape.len())),
        };
        payload.validate().map_err(|e| e.to_string())?;
        payloads.insert(kind, payload);
    }
    let sample = SensorSample {
        sample_id: r.sample_id,
        task_id: r.task_id,
        task: r.task,
        payloads,
        label: r.label,
        latent: if keep_latent { r.latent } else { None },
    };
    let text = match (r.instruction, r.answer) {
        (Some(i), Some(a)) => Some((i, a, r.options)),
        (None, None) => None,
        _ => return Err("instruction and answer must appear together".into()),
    };
    Ok((sample, text))
}

fn write_lines(path: &Path, records: impl Iterator<Item = Record>) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).map_err(|e| Error::Io(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, &out).map_err(|e| Error::io_at(path, e))?;
    Ok(fnv1a64_hex(out.as_bytes()))
}

fn read_lines(path: &Path, keep_latent: bool) -> Result<Vec<(SensorSample, Option<(String, String, Option<Vec<String>>)>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
        line: None,
        msg: format!("not UTF-8: {e}"),
    })?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let fail = |msg: String| Error::Format { line: Some(i + 1), msg };
            let r: Record = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
            from_record(r, keep_latent).map_err(fail)
        })
        .collect()
}

/// Writes samples and returns the file digest.
pub fn write_samples(path: &Path, samples: &[SensorSample]) -> Result<String> {
    write_lines(path, samples.iter().map(to_record))
}

pub fn write_instructions(path: &Path, samples: &[InstructionSample]) -> Result<String> {
    write_lines(
        path,
        samples.iter().map(|s| {
            let mut r = to_record(&s.base);
            r.instruction = Some(s.instruction.clone());
            r.answer = Some(s.answer.clone());
            r.options = s.options.clone();
            r
        }),
    )
}

/// Reads every record; latents are dropped unless `keep_latent`. Any
/// malformed line fails the whole read.
pub fn read_samples(path: &Path, keep_latent: bool) -> Result<Vec<SensorSample>> {
    Ok(read_lines(path, keep_latent)?.into_iter().map(|(s, _)| s).collect())
}

pub fn read_instructions(path: &Path, keep_latent: bool) -> Result<Vec<InstructionSample>> {
    read_lines(path, keep_latent)?
        .into_iter()
        .enumerate()
        .map(|(i, (base, text))| {
            let (instruction, answer, options) = text.ok_or(Error::Format {
                line: Some(i + 1),
                msg: "record has no instruction".into(),
            })?;
            Ok(InstructionSample {
                base,
                instruction,
                answer,
                options,
            })
        })
        .collect()
}

/// Provenance of a generated dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tasks: Vec<String>,
    pub generator_version: u32,
    pub seed: u64,
    pub noise_scale: f32,
    /// Records per file name.
    pub counts: BTreeMap<String, usize>,
    pub modality_ratio: Option<String>,
    pub task_ratio: Option<f64>,
    /// FNV-1a hex digest per file name.
    pub digests: BTreeMap<String, String>,
    /// Generating configuration, as TOML.
    #[serde(default)]
    pub config: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").map_err(|e| Error::io_at(&path, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            line: Some(e.line()),
            msg: format!("manifest: {e}"),
        })
    }

    /// Checks every listed file against its digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (name, want) in &self.digests {
            let got = file_digest(&dir.join(name))?;
            if &got != want {
                return Err(Error::Format {
                    line: None,
                    msg: format!("{name}: digest {got} does not match manifest {want}"),
                });
            }
        }
        Ok(())
    }
}

/// Digest of the JSONL rendering of `samples`, as [`write_samples`] would write it.
pub fn samples_digest(samples: &[SensorSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(&to_record(s)).expect("record serialises"));
        out.push('\n');
    }
    fnv1a64_hex(out.as_bytes())
}
