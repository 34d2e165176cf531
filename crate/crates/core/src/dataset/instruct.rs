//! Templated instruction/answer pairs over sensor samples.
//!
//! Classification answers read `"<class>. <Statistic> is <level>."`; the class
//! name is the text before the first period. Regression answers are
//! comma-separated values with two decimals.

use crate::digest::mix_seed;
use crate::encoders::ModalityKind;
use crate::error::{Error, Result};
use crate::lm::{ByteTokenizer, BOS, EOS};
use crate::tasks::{Label, TaskSpec};

use super::SensorSample;

#[derive(Clone, Debug, PartialEq)]
pub struct InstructionSample {
    pub base: SensorSample,
    pub instruction: String,
    pub answer: String,
    pub options: Option<Vec<String>>,
}

impl InstructionSample {
    /// `[BOS] instruction ' ' answer [EOS]` and the index of the first answer token.
    pub fn token_ids(&self) -> (Vec<usize>, usize) {
        let mut ids = vec![BOS];
        ids.extend(ByteTokenizer.encode(&self.instruction));
        ids.extend(ByteTokenizer.encode(" "));
        let start = ids.len();
        ids.extend(ByteTokenizer.encode(&self.answer));
        ids.push(EOS);
        (ids, start)
    }

    /// Prompt tokens up to and including the separator before the answer.
    pub fn prompt_ids(&self) -> Vec<usize> {
        let (ids, start) = self.token_ids();
        ids[..start].to_vec()
    }
}

fn templates(task: &str) -> [&'static str; 3] {
    match task {
        "gaze" => [
            "Report the gaze location in centimeters as x,y.",
            "Where on the screen is the user looking? Give x,y in cm.",
            "Estimate the gaze point as x,y centimeters.",
        ],
        "depth" => [
            "Report the scene depth at the image center in mm.",
            "How far is the center of the view? Answer in mm.",
            "Estimate the central depth in millimeters.",
        ],
        "pose" => [
            "Report the first joint angles as three values.",
            "Give the root joint rotation in degrees.",
            "Estimate the first joint triplet of the body pose.",
        ],
        "recon3d" => [
            "Report the wrist position as x,y,z in mm.",
            "Where is the wrist? Give x,y,z millimeters.",
            "Estimate the 3D wrist location in mm.",
        ],
        "gesture" => [
            "Which gesture was performed?",
            "Name the hand gesture in this recording.",
            "What gesture do the sensors show?",
        ],
        "touch" => [
            "Which hand part touched the panel?",
            "Name the touch contact type.",
            "What kind of touch is this?",
        ],
        "event" => [
            "Which kitchen event is happening?",
            "Name the sound event in this clip.",
            "What event do the sensors capture?",
        ],
        _ => [
            "Which activity best matches this recording?",
            "Name the activity of the wearer.",
            "What is the person doing?",
        ],
    }
}

/// Compact option list: full names when short, otherwise a `{a|b}_{c|d}`
/// product form when the names factor that way.
fn render_options(names: &[String]) -> String {
    let full = names.join(", ");
    if full.len() <= 48 {
        return full;
    }
    let split: Option<Vec<(&str, &str)>> = names.iter().map(|n| n.split_once('_')).collect();
    if let Some(parts) = split {
        let mut heads: Vec<&str> = Vec::new();
        let mut tails: Vec<&str> = Vec::new();
        for &(h, t) in &parts {
            if !heads.contains(&h) {
                heads.push(h);
            }
            if !tails.contains(&t) {
                tails.push(t);
            }
        }
        if heads.len() * tails.len() == names.len() {
            return format!("{{{}}}_{{{}}}", heads.join("|"), tails.join("|"));
        }
    }
    full
}

fn level(v: f64) -> &'static str {
    if v < 0.15 {
        "low"
    } else if v < 0.4 {
        "medium"
    } else {
        "high"
    }
}

fn stat_name(kind: ModalityKind) -> &'static str {
    match kind {
        ModalityKind::Imu => "Motion energy",
        ModalityKind::Audio => "Sound energy",
        ModalityKind::Image | ModalityKind::Video => "Image brightness",
        _ => "Signal strength",
    }
}

/// Values a regression answer reports, in native units.
pub fn answer_values(spec: &TaskSpec, label: &Label) -> Result<Vec<f32>> {
    let v = match label {
        Label::Values(v) => v,
        Label::Class(_) => return Err(Error::Data(format!("class label for regression task {}", spec.name))),
    };
    Ok(match spec.name.as_str() {
        "depth" => {
            let n = crate::tasks::shapes::DEPTH_GRID;
            let (a, b) = (n / 2 - 1, n / 2);
            vec![(v[a * n + a] + v[a * n + b] + v[b * n + a] + v[b * n + b]) / 4.0]
        }
        "pose" | "recon3d" => v[..3].to_vec(),
        _ => v.clone(),
    })
}

/// Parses a regression answer back into values.
pub fn parse_values(answer: &str) -> Result<Vec<f64>> {
    answer
        .trim()
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("answer {answer:?} is not a value list")))
        })
        .collect()
}

/// Class name stated in a classification answer.
pub fn answer_class(answer: &str) -> &str {
    answer.split('.').next().unwrap_or("").trim()
}

fn build(spec: &TaskSpec, s: &SensorSample, template_seed: u64) -> Result<InstructionSample> {
    let t = (mix_seed(template_seed, s.sample_id) % 3) as usize;
    let question = templates(&spec.name)[t];
    let (instruction, answer, options) = match &s.label {
        Label::Class(c) => {
            let name = spec
                .class_names
                .get(*c)
                .ok_or_else(|| Error::Data(format!("class {c} outside task {}", spec.name)))?;
            let (kind, payload) = s
                .payloads
                .iter()
                .next()
                .ok_or_else(|| Error::Data(format!("sample {} has no payloads", s.sample_id)))?;
            let vals = payload.values();
            let mean_abs = vals.iter().map(|v| v.abs() as f64).sum::<f64>() / vals.len().max(1) as f64;
            (
                format!("{question} Options: {}. Answer:", render_options(&spec.class_names)),
                format!("{name}. {} is {}.", stat_name(*kind), level(mean_abs)),
                Some(spec.class_names.clone()),
            )
        }
        label => {
            let vals = answer_values(spec, label)?;
            let text: Vec<String> = vals.iter().map(|v| format!("{v:.2}")).collect();
            (format!("{question} Answer:"), text.join(","), None)
        }
    };
    Ok(InstructionSample {
        base: s.clone(),
        instruction,
        answer,
        options,
    })
}

/// One instruction pair per sample; the template is chosen from
/// `(template_seed, sample_id)`.
pub fn make_instruction_pairs(spec: &TaskSpec, samples: &[SensorSample], template_seed: u64) -> Result<Vec<InstructionSample>> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to template".into()));
    }
    samples.iter().map(|s| build(spec, s, template_seed)).collect()
}
