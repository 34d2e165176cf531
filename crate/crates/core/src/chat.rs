//! Sensor-grounded question answering over a loaded record.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::adapter::{merged_forward, MergedModel};
use crate::autodiff::Graph;
use crate::dataset::{read_samples, SensorSample};
use crate::error::{Error, Result};
use crate::lm::{generate_greedy, ByteTokenizer, BOS, EOS};
use crate::tasks::Prediction;
use crate::train::predict;

pub const HELP: &str = "commands:\n  :load <records.jsonl> [index]  load a sensor record\n  :help                          show this text\n  :quit                          leave\nany other line is asked as a question about the loaded record\n";

/// Longest generated answer, in tokens.
pub const MAX_ANSWER: usize = 48;

/// Prompt ids for `question`, ending in the separator before the answer.
pub fn prompt_ids(question: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(ByteTokenizer.encode(question.trim()));
    ids.extend(ByteTokenizer.encode(" "));
    ids
}

/// Greedy answer to `question` about `sample`, conditioned on its sensor
/// prefix for the sample's task.
pub fn answer(model: &MergedModel, sample: &SensorSample, question: &str) -> Result<String> {
    if model.config.direct_head {
        return Err(Error::Config("direct-head models have no text path".into()));
    }
    let prompt = prompt_ids(question);
    let p = model.config.adapter.prefix_len;
    let budget = model.config.lm.max_len - p;
    let max_new = MAX_ANSWER.min(budget.saturating_sub(prompt.len()));
    let v = model.config.lm.vocab_size;
    let ids = generate_greedy(
        |seq| {
            let mut g = Graph::<f32>::new();
            let out = merged_forward(&mut g, model, &sample.payloads, &sample.task, Some(seq))?;
            let logits = out.logits.ok_or_else(|| Error::Contract("no text logits".into()))?;
            let d = g.data(logits);
            Ok(d[d.len() - v..].to_vec())
        },
        &prompt,
        max_new,
        EOS,
        budget,
    )?;
    Ok(ByteTokenizer.decode(&ids))
}

/// What [`ChatSession::handle`] asks the caller to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Quit,
}

pub struct ChatSession<'m> {
    pub model: &'m MergedModel,
    pub sample: Option<SensorSample>,
}

impl<'m> ChatSession<'m> {
    pub fn new(model: &'m MergedModel) -> Self {
        Self { model, sample: None }
    }

    fn load(&mut self, args: &str, out: &mut impl Write) -> Result<()> {
        let mut parts = args.split_whitespace();
        let path = parts.next().ok_or_else(|| Error::Config("usage: :load <records.jsonl> [index]".into()))?;
        let index: usize = match parts.next() {
            Some(i) => i.parse().map_err(|_| Error::Config(format!("record index {i:?} is not a number")))?,
            None => 0,
        };
        let samples = read_samples(Path::new(path), false)?;
        let s = samples
            .into_iter()
            .nth(index)
            .ok_or_else(|| Error::Data(format!("{path} has no record {index}")))?;
        self.model.task(&s.task)?;
        writeln!(out, "loaded sample {} ({}, {} modalities)", s.sample_id, s.task, s.payloads.len())?;
        self.sample = Some(s);
        Ok(())
    }

    fn ask(&self, question: &str, out: &mut impl Write) -> Result<()> {
        let s = self
            .sample
            .as_ref()
            .ok_or_else(|| Error::Config("no record loaded; use :load <path> first".into()))?;
        let text = answer(self.model, s, question)?;
        let (pred, gates) = predict(self.model, s, &s.task)?;
        let spec = self.model.task(&s.task)?;
        writeln!(out, "answer: {text}")?;
        match pred {
            Prediction::Class { id, .. } => writeln!(out, "head: {}", spec.class_names[id])?,
            Prediction::Values(v) => {
                let shown: Vec<String> = v.iter().take(3).map(|x| format!("{x:.2}")).collect();
                writeln!(out, "head: {}{}", shown.join(","), if v.len() > 3 { ",..." } else { "" })?
            }
        }
        let gates: Vec<String> = gates.iter().map(|(k, w)| format!("{k}={w:.3}")).collect();
        writeln!(out, "gates: {}", gates.join(" "))?;
        Ok(())
    }

    /// Handles one input line. Errors are reported on `out` and the session
    /// continues.
    pub fn handle(&mut self, line: &str, out: &mut impl Write) -> Result<Control> {
        let line = line.trim();
        let result = if line.is_empty() {
            Ok(())
        } else if line == ":quit" {
            return Ok(Control::Quit);
        } else if line == ":help" {
            out.write_all(HELP.as_bytes()).map_err(Error::from)
        } else if let Some(rest) = line.strip_prefix(":load") {
            self.load(rest, out)
        } else if line.starts_with(':') {
            writeln!(out, "unknown command {line}")?;
            out.write_all(HELP.as_bytes()).map_err(Error::from)
        } else {
            self.ask(line, out)
        };
        if let Err(e) = result {
            writeln!(out, "error: {e}")?;
        }
        Ok(Control::Continue)
    }

    /// Runs until `:quit` or end of input.
    pub fn run(&mut self, input: impl BufRead, out: &mut impl Write, prompt: bool) -> Result<()> {
        for line in input.lines() {
            if self.handle(&line?, out)? == Control::Quit {
                break;
            }
            if prompt {
                write!(out, "> ")?;
                out.flush()?;
            }
        }
        Ok(())
    }
}
