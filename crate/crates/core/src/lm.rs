//! Byte-level causal language model used as the frozen base.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor};
use crate::error::{Error, Result};
use crate::nn::layers::{init_block, transformer_block_apply, AttentionMode, INIT_STD, LN_EPS};
use crate::nn::{AdamConfig, AdamState, Param, ParamSet};

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const SEP: usize = 259;
pub const VOCAB_SIZE: usize = 260;

/// Root of every language-model parameter path.
pub const LM_PREFIX: &str = "lm.";

/// Bytes map to ids `0..256`; four special ids follow.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize).collect()
    }

    /// Byte values of `ids`, special ids dropped.
    pub fn decode_bytes(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmPreset {
    Tiny,
    Small,
    Medium,
}

impl LmPreset {
    pub const ALL: [LmPreset; 3] = [LmPreset::Tiny, LmPreset::Small, LmPreset::Medium];

    pub fn name(self) -> &'static str {
        match self {
            LmPreset::Tiny => "tiny",
            LmPreset::Small => "small",
            LmPreset::Medium => "medium",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(LmPreset::Tiny),
            "small" => Ok(LmPreset::Small),
            "medium" => Ok(LmPreset::Medium),
            _ => Err(Error::Config(format!("unknown LM preset {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LMConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl LMConfig {
    pub fn preset(p: LmPreset) -> Self {
        let (d_model, layers) = match p {
            LmPreset::Tiny => (64, 2),
            LmPreset::Small => (128, 4),
            LmPreset::Medium => (256, 6),
        };
        Self {
            d_model,
            layers,
            heads: 4,
            max_len: 256,
            vocab_size: VOCAB_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.max_len == 0 || self.vocab_size < VOCAB_SIZE {
            return Err(Error::Config(format!("degenerate LM config {self:?}")));
        }
        Ok(())
    }
}

/// Sensor prefix handed to [`lm_forward`].
///
/// Prefix rows start at zero; before block `l` every `(l, rows)` injection is
/// added to them. Text queries see the prefix through a per-layer gate.
/// Prefix rows carry no positional embedding.
#[derive(Clone, Debug)]
pub struct Prefix {
    pub len: usize,
    pub injections: Vec<(usize, Tensor)>,
    /// One single-element gate per layer.
    pub gates: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct LmOutput {
    /// Final hidden states after the last layer norm, `(p + t) × d`.
    pub hidden: Tensor,
    /// `t × vocab`, absent when there is no text.
    pub logits: Option<Tensor>,
}

fn block_path(l: usize) -> String {
    format!("lm.blocks.{l}")
}

/// Registers all LM parameters under `lm.`.
pub fn init_lm(params: &mut ParamSet, cfg: &LMConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    params.insert("lm.tok_emb", Param::normal(&[cfg.vocab_size, d], INIT_STD, &mut rng))?;
    params.insert("lm.pos_emb", Param::normal(&[cfg.max_len, d], INIT_STD, &mut rng))?;
    for l in 0..cfg.layers {
        init_block(params, &block_path(l), d, &mut rng)?;
    }
    params.insert("lm.ln_f.g", Param::filled(&[d], 1.0))?;
    params.insert("lm.ln_f.b", Param::zeros(&[d]))
}

/// Runs the LM over `[prefix; ids]`. Text positions use positional ids `0..t`.
pub fn lm_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet,
    cfg: &LMConfig,
    prefix: Option<&Prefix>,
    ids: &[usize],
) -> Result<LmOutput> {
    let p = prefix.map_or(0, |x| x.len);
    let t = ids.len();
    if p + t > cfg.max_len {
        return Err(Error::Length {
            len: p + t,
            max: cfg.max_len,
        });
    }
    if p + t == 0 {
        return Err(Error::Contract("empty LM input".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Index(format!("token id {bad} outside vocabulary")));
    }
    if let Some(px) = prefix {
        if px.gates.len() != cfg.layers || px.injections.iter().any(|(l, _)| *l >= cfg.layers) {
            return Err(Error::Config(format!(
                "prefix needs {} gates and injection layers below that",
                cfg.layers
            )));
        }
    }
    let d = cfg.d_model;
    let tok = params.bind(g, "lm.tok_emb")?;
    let text = if t > 0 {
        let pos_table = params.bind(g, "lm.pos_emb")?;
        let e = g.gather_rows(tok, ids)?;
        let positions: Vec<usize> = (0..t).collect();
        let pe = g.gather_rows(pos_table, &positions)?;
        Some(g.add(e, pe)?)
    } else {
        None
    };
    let mut x = match (prefix, text) {
        (None, Some(tx)) => tx,
        (Some(_), tx) => {
            let zp = g.zeros(&[p, d]);
            match tx {
                Some(tx) => g.concat_rows(&[zp, tx])?,
                None => zp,
            }
        }
        (None, None) => unreachable!("empty input rejected above"),
    };
    for l in 0..cfg.layers {
        let mode = match prefix {
            Some(px) => {
                for (_, rows) in px.injections.iter().filter(|(il, _)| *il == l) {
                    if g.shape(*rows) != [p, d] {
                        return Err(Error::Shape(format!(
                            "prefix injection {:?}, expected [{p}, {d}]",
                            g.shape(*rows)
                        )));
                    }
                    let head = g.slice_rows(x, 0, p)?;
                    let head = g.add(head, *rows)?;
                    x = if t > 0 {
                        let tail = g.slice_rows(x, p, t)?;
                        g.concat_rows(&[head, tail])?
                    } else {
                        head
                    };
                }
                AttentionMode::GatedPrefix {
                    prefix_len: p,
                    gate: px.gates[l],
                }
            }
            None => AttentionMode::Causal,
        };
        x = transformer_block_apply(g, params, &block_path(l), x, cfg.heads, mode)?;
    }
    let gf = params.bind(g, "lm.ln_f.g")?;
    let bf = params.bind(g, "lm.ln_f.b")?;
    let hidden = g.layer_norm(x, gf, bf, LN_EPS)?;
    let logits = if t > 0 {
        let h_text = if p > 0 { g.slice_rows(hidden, p, t)? } else { hidden };
        let tok_t = g.transpose(tok)?;
        Some(g.matmul(h_text, tok_t)?)
    } else {
        None
    };
    Ok(LmOutput { hidden, logits })
}

/// Next-token cross-entropy of `ids` under the plain LM.
pub fn lm_next_token_loss<T: Real>(g: &mut Graph<T>, params: &ParamSet, cfg: &LMConfig, ids: &[usize]) -> Result<Tensor> {
    if ids.len() < 2 {
        return Err(Error::Contract("next-token loss needs at least two tokens".into()));
    }
    let out = lm_forward(g, params, cfg, None, &ids[..ids.len() - 1])?;
    g.cross_entropy(out.logits.expect("text present"), &ids[1..], usize::MAX)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. `next_logits` returns the logits of the last position of
/// the given token sequence. Stops after `max_new` tokens or once `stop_id` is
/// produced; the stop token is not included.
pub fn generate_greedy(
    mut next_logits: impl FnMut(&[usize]) -> Result<Vec<f32>>,
    prompt: &[usize],
    max_new: usize,
    stop_id: usize,
    budget: usize,
) -> Result<Vec<usize>> {
    if prompt.len() + max_new > budget {
        return Err(Error::Length {
            len: prompt.len() + max_new,
            max: budget,
        });
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let next = argmax(&next_logits(&seq)?);
        if next == stop_id {
            break;
        }
        seq.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Last-position logits of the plain LM.
pub fn lm_last_logits(params: &ParamSet, cfg: &LMConfig, ids: &[usize]) -> Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let out = lm_forward(&mut g, params, cfg, None, ids)?;
    let logits = out.logits.ok_or_else(|| Error::Contract("no text to decode from".into()))?;
    let v = cfg.vocab_size;
    let data = g.data(logits);
    Ok(data[data.len() - v..].to_vec())
}

/// Budget for stub pretraining on a text corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StubPretrain {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for StubPretrain {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            lr: 3e-3,
        }
    }
}

/// `[BOS] bytes [EOS]` per non-empty corpus line, truncated to the context.
pub fn corpus_sequences(corpus: &str, max_len: usize) -> Vec<Vec<usize>> {
    let tk = ByteTokenizer;
    corpus
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut s = vec![BOS];
            s.extend(tk.encode(l));
            s.push(EOS);
            s.truncate(max_len + 1);
            s
        })
        .collect()
}

/// Seeded LM, optionally stub-pretrained on `corpus`, with every path frozen.
pub fn build_frozen_lm(cfg: &LMConfig, corpus: Option<&str>, stub: StubPretrain, seed: u64) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    init_lm(&mut params, cfg, seed)?;
    if let Some(text) = corpus {
        let seqs = corpus_sequences(text, cfg.max_len);
        if seqs.is_empty() {
            return Err(Error::Data("corpus has no usable lines".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let mut opt = AdamState::new(AdamConfig {
            lr: stub.lr,
            ..AdamConfig::default()
        });
        let mut order: Vec<usize> = Vec::new();
        for _ in 0..stub.steps {
            let mut g = Graph::<f32>::new();
            let mut losses = Vec::with_capacity(stub.batch);
            for _ in 0..stub.batch.max(1) {
                if order.is_empty() {
                    order = (0..seqs.len()).collect();
                    order.shuffle(&mut rng);
                }
                let s = &seqs[order.pop().expect("refilled")];
                if s.len() >= 2 {
                    losses.push(lm_next_token_loss(&mut g, &params, cfg, s)?);
                }
            }
            if losses.is_empty() {
                continue;
            }
            let n = losses.len();
            let stacked = g.concat_rows(&losses)?;
            let total = g.sum(stacked);
            let loss = g.scale(total, 1.0 / n as f32);
            if !g.item(loss).is_finite() {
                return Err(Error::Numeric("stub pretraining diverged".into()));
            }
            g.backward(loss)?;
            let grads = params.grads_from(&g);
            opt.update(&mut params, &grads)?;
        }
    }
    params.freeze_prefix(LM_PREFIX);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, Coords};
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny() -> LMConfig {
        LMConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            max_len: 32,
            vocab_size: VOCAB_SIZE,
        }
    }

    #[test]
    fn tokenizer_examples() {
        let tk = ByteTokenizer;
        assert!(tk.encode("").is_empty());
        assert_eq!(tk.decode(&[]), "");
        assert_eq!(tk.encode("ab"), vec![97, 98]);
        assert_eq!(tk.decode(&[BOS, 97, 98, EOS]), "ab");
    }

    #[test]
    fn tokenizer_random_round_trip() {
        let tk = ByteTokenizer;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.random_range(0..40);
            let bytes: Vec<u8> = (0..n).map(|_| rng.random()).collect();
            assert_eq!(tk.decode_bytes(&tk.encode_bytes(&bytes)), bytes);
        }
    }

    proptest! {
        #[test]
        fn tokenizer_round_trips_any_string(s in ".*") {
            let tk = ByteTokenizer;
            prop_assert_eq!(tk.decode(&tk.encode(&s)), s);
        }
    }

    #[test]
    fn presets_grow_and_validate() {
        let mut prev = 0;
        for p in LmPreset::ALL {
            let cfg = LMConfig::preset(p);
            cfg.validate().unwrap();
            let mut ps = ParamSet::new();
            init_lm(&mut ps, &cfg, 0).unwrap();
            let n = ps.num_elements(None);
            assert!(n > prev);
            prev = n;
            assert_eq!(LmPreset::parse(p.name()).unwrap(), p);
        }
        let bad = LMConfig { heads: 3, ..tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn untrained_loss_near_uniform() {
        let cfg = tiny();
        let mut ps = ParamSet::new();
        init_lm(&mut ps, &cfg, 1).unwrap();
        let mut g = Graph::<f32>::new();
        let ids = ByteTokenizer.encode("hello world");
        let l = lm_next_token_loss(&mut g, &ps, &cfg, &ids).unwrap();
        assert!((g.item(l) - (260f32).ln()).abs() < 0.05, "{}", g.item(l));
        assert!(lm_next_token_loss(&mut g, &ps, &cfg, &[1]).is_err());
    }

    #[test]
    fn length_overflow_rejected() {
        let cfg = tiny();
        let mut ps = ParamSet::new();
        init_lm(&mut ps, &cfg, 1).unwrap();
        let mut g = Graph::<f32>::new();
        let ids = vec![1; 33];
        assert!(matches!(
            lm_forward(&mut g, &ps, &cfg, None, &ids),
            Err(Error::Length { len: 33, max: 32 })
        ));
    }

    #[test]
    fn causality_of_text_logits() {
        let cfg = tiny();
        let mut ps = ParamSet::new();
        init_lm(&mut ps, &cfg, 2).unwrap();
        let run = |ids: &[usize]| {
            let mut g = Graph::<f32>::new();
            let o = lm_forward(&mut g, &ps, &cfg, None, ids).unwrap();
            g.data(o.logits.unwrap()).to_vec()
        };
        let a = run(&[5, 6, 7, 8]);
        let b = run(&[5, 6, 7, 200]);
        let v = VOCAB_SIZE;
        assert_eq!(&a[..3 * v], &b[..3 * v]);
        assert_ne!(&a[3 * v..], &b[3 * v..]);
    }

    fn prefix_run(ps: &ParamSet, cfg: &LMConfig, rows: &[f32], gate: f32, ids: &[usize]) -> Vec<f32> {
        let mut g = Graph::<f32>::new();
        let r = g.tensor_f32(&[3, cfg.d_model], rows, false).unwrap();
        let gates = (0..cfg.layers).map(|_| g.scalar(gate)).collect();
        let px = Prefix {
            len: 3,
            injections: vec![(0, r)],
            gates,
        };
        let o = lm_forward(&mut g, ps, cfg, Some(&px), ids).unwrap();
        g.data(o.logits.unwrap()).to_vec()
    }

    #[test]
    fn closed_gate_prefix_leaves_logits_exact() {
        let cfg = tiny();
        let mut ps = ParamSet::new();
        init_lm(&mut ps, &cfg, 4).unwrap();
        let ids = [BOS, 10, 20, 30];
        let mut g = Graph::<f32>::new();
        let plain = lm_forward(&mut g, &ps, &cfg, None, &ids).unwrap();
        let plain = g.data(plain.logits.unwrap()).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<f32> = (0..3 * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
        assert_eq!(prefix_run(&ps, &cfg, &rows, 0.0, &ids), plain);
        let open = prefix_run(&ps, &cfg, &rows, 0.5, &ids);
        assert_ne!(open, plain);
        let mut rows2 = rows.clone();
        rows2[0] += 1.0;
        let open2 = prefix_run(&ps, &cfg, &rows2, 0.5, &ids);
        assert_ne!(open, open2);
        // last text token does not influence earlier logits
        let ids2 = [BOS, 10, 20, 31];
        let other = prefix_run(&ps, &cfg, &rows, 0.5, &ids2);
        assert_eq!(&open[..3 * VOCAB_SIZE], &other[..3 * VOCAB_SIZE]);
    }

    #[test]
    fn prefix_gradient_check() {
        let cfg = tiny();
        let mut ps = ParamSet::new();
        init_lm(&mut ps, &cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<f64> = (0..3 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rep = finite_diff_check(
            |g, x| {
                let gates = (0..cfg.layers).map(|_| g.scalar(0.7)).collect();
                let px = Prefix {
                    len: 3,
                    injections: vec![(0, x[0])],
                    gates,
                };
                let o = lm_forward(g, &ps, &cfg, Some(&px), &[BOS, 65, 66])?;
                Ok(g.mean(o.logits.unwrap()))
            },
            &[(vec![3, 16], rows)],
            1e-3,
            1e-3,
            Coords::All,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn prefix_only_forward_has_no_logits() {
        let cfg = tiny();
        let mut ps = ParamSet::new();
        init_lm(&mut ps, &cfg, 6).unwrap();
        let mut g = Graph::<f32>::new();
        let r = g.zeros(&[3, 16]);
        let gates = (0..cfg.layers).map(|_| g.scalar(0.0)).collect();
        let px = Prefix {
            len: 3,
            injections: vec![(1, r)],
            gates,
        };
        let o = lm_forward(&mut g, &ps, &cfg, Some(&px), &[]).unwrap();
        assert!(o.logits.is_none());
        assert_eq!(g.shape(o.hidden), &[3, 16]);
    }

    #[test]
    fn greedy_decoding_contract() {
        let cfg = tiny();
        let mut ps = ParamSet::new();
        init_lm(&mut ps, &cfg, 7).unwrap();
        let f = |s: &[usize]| lm_last_logits(&ps, &cfg, s);
        assert!(generate_greedy(f, &[BOS], 0, EOS, 32).unwrap().is_empty());
        let a = generate_greedy(f, &[BOS, 1], 5, EOS, 32).unwrap();
        let b = generate_greedy(f, &[BOS, 1], 5, EOS, 32).unwrap();
        assert_eq!(a, b);
        assert!(generate_greedy(f, &[BOS; 30], 5, EOS, 32).is_err());
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn memorizes_a_repeated_sequence() {
        let cfg = LMConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            max_len: 64,
            vocab_size: VOCAB_SIZE,
        };
        let text = "sensor says: walking\n".repeat(4);
        let ps = build_frozen_lm(
            &cfg,
            Some(&text),
            StubPretrain {
                steps: 500,
                batch: 1,
                lr: 1e-3,
            },
            11,
        )
        .unwrap();
        let ids = corpus_sequences(&text, cfg.max_len).remove(0);
        let mut g = Graph::<f32>::new();
        let l = lm_next_token_loss(&mut g, &ps, &cfg, &ids).unwrap();
        assert!(g.item(l) < 0.1, "loss {}", g.item(l));
        assert_eq!(ps.frozen_paths().count(), ps.len());
    }

    #[test]
    fn build_is_deterministic_and_fully_frozen() {
        let cfg = tiny();
        let a = build_frozen_lm(&cfg, None, StubPretrain::default(), 9).unwrap();
        let b = build_frozen_lm(&cfg, None, StubPretrain::default(), 9).unwrap();
        assert_eq!(a.serialize(), b.serialize());
        assert_eq!(a.trainable_paths().count(), 0);
        let stub = StubPretrain {
            steps: 3,
            batch: 2,
            lr: 1e-3,
        };
        let c = build_frozen_lm(&cfg, Some("ab\ncd\n"), stub, 9).unwrap();
        let d = build_frozen_lm(&cfg, Some("ab\ncd\n"), stub, 9).unwrap();
        assert_eq!(c.serialize(), d.serialize());
        assert_ne!(a.serialize(), c.serialize());
    }
}
