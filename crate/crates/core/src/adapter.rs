//! The multisensory multitask adapter and the merged model built around the
//! frozen language model.
//!
//! Forward path: encoders → gate → late fusion → adapter MLP → prefix rows
//! injected into the LM → final hidden state at the last prefix slot → task head.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ReduceKind, Real, Tensor};
use crate::encoders::{encode_sample, init_encoders, EncoderConfig, ModalityKind, Payload};
use crate::error::{Error, Result};
use crate::fusion::{gate_weights, init_fusion, init_task_gate, late_fuse, FusionKind};
use crate::lm::{lm_forward, LMConfig, Prefix, LM_PREFIX};
use crate::nn::layers::{init_linear, linear, INIT_STD};
use crate::nn::{Param, ParamSet};
use crate::tasks::{head_apply, init_head, TaskSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionMode {
    /// Prefix rows enter before the first block.
    #[default]
    InputPrefix,
    /// A separate projection is added to the prefix rows before each listed block.
    PerLayerPrefix,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub prefix_len: usize,
    pub insertion: InsertionMode,
    /// Blocks receiving an injection in per-layer mode.
    pub layers: Vec<usize>,
    pub hidden: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            prefix_len: 16,
            insertion: InsertionMode::InputPrefix,
            layers: vec![0],
            hidden: 128,
        }
    }
}

impl AdapterConfig {
    pub fn injection_layers(&self) -> Vec<usize> {
        match self.insertion {
            InsertionMode::InputPrefix => vec![0],
            InsertionMode::PerLayerPrefix => self.layers.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lm: LMConfig,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub fusion: FusionKind,
    pub gate_temperature: f32,
    /// Heads read pooled adapter features directly; the LM is bypassed.
    pub direct_head: bool,
}

impl ModelConfig {
    pub fn new(lm: LMConfig) -> Self {
        Self {
            lm,
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            fusion: FusionKind::LateGated,
            gate_temperature: 1.0,
            direct_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.encoder.validate()?;
        self.fusion.ensure_supported()?;
        let a = &self.adapter;
        if a.prefix_len == 0 || a.hidden == 0 {
            return Err(Error::Config("adapter prefix length and hidden width must be positive".into()));
        }
        if a.prefix_len >= self.lm.max_len {
            return Err(Error::Config(format!(
                "prefix length {} leaves no room in a context of {}",
                a.prefix_len, self.lm.max_len
            )));
        }
        let layers = a.injection_layers();
        if layers.is_empty() || layers.iter().any(|&l| l >= self.lm.layers) {
            return Err(Error::Config(format!(
                "insertion layers {layers:?} must be a non-empty subset of 0..{}",
                self.lm.layers
            )));
        }
        if self.gate_temperature <= 0.0 {
            return Err(Error::Config("gate temperature must be positive".into()));
        }
        Ok(())
    }

    /// Width of the vector task heads read.
    pub fn readout_width(&self) -> usize {
        if self.direct_head {
            self.adapter.hidden
        } else {
            self.lm.d_model
        }
    }
}

pub fn task_emb_path(task: &str) -> String {
    format!("task.{task}.emb")
}

pub fn gate_path(layer: usize) -> String {
    format!("adapter.gate.{layer}")
}

fn out_path(layer: usize) -> String {
    format!("adapter.out.{layer}")
}

const FC: &str = "adapter.fc";

/// Frozen LM plus all trainable encoder, gate, adapter and task parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedModel {
    pub config: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub params: ParamSet,
}

impl MergedModel {
    /// Wraps `lm_params` (every path under `lm.`, all frozen) with freshly
    /// initialised trainable parts for `tasks`.
    pub fn new(config: ModelConfig, tasks: Vec<TaskSpec>, lm_params: ParamSet, seed: u64) -> Result<Self> {
        config.validate()?;
        if lm_params.paths().any(|p| !p.starts_with(LM_PREFIX)) || lm_params.trainable_paths().next().is_some() {
            return Err(Error::Contract("LM parameter set must be lm.* paths, all frozen".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = lm_params;
        let c = &config;
        init_encoders(&mut params, &c.encoder, &ModalityKind::ALL, &mut rng)?;
        init_fusion(&mut params, c.encoder.d_enc)?;
        init_linear(&mut params, FC, c.encoder.d_enc, c.adapter.hidden, false, &mut rng)?;
        for l in c.adapter.injection_layers() {
            init_linear(&mut params, &out_path(l), c.adapter.hidden, c.lm.d_model, true, &mut rng)?;
        }
        for l in 0..c.lm.layers {
            params.insert(gate_path(l), Param::zeros(&[1]))?;
        }
        let mut model = Self {
            config,
            tasks: Vec::new(),
            params,
        };
        for t in tasks {
            model.add_task(t, seed)?;
        }
        Ok(model)
    }

    /// Registers task embedding, gate bias and a zero head for a new task.
    pub fn add_task(&mut self, spec: TaskSpec, seed: u64) -> Result<()> {
        spec.validate()?;
        if self.tasks.iter().any(|t| t.name == spec.name) {
            return Err(Error::Config(format!("task {} already registered", spec.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x7a5c_0000 + spec.id as u64));
        let p = self.config.adapter.prefix_len;
        self.params.insert(
            task_emb_path(&spec.name),
            Param::normal(&[p, self.config.lm.d_model], INIT_STD, &mut rng),
        )?;
        init_task_gate(&mut self.params, &spec.name)?;
        init_head(&mut self.params, &spec, self.config.readout_width())?;
        self.tasks.push(spec);
        self.tasks.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(())
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        crate::tasks::find_task(&self.tasks, name)
    }

    /// Every path outside the LM.
    pub fn trainable_params(&self) -> ParamSet {
        self.params.filter(|p| !p.starts_with(LM_PREFIX))
    }

    pub fn lm_params(&self) -> ParamSet {
        self.params.filter(|p| p.starts_with(LM_PREFIX))
    }
}

/// Adapter MLP per token, resampled to `prefix_len` rows, one projection per
/// injection layer; the task embedding is added to the first injection.
/// Returns the MLP features (before resampling) and the injections.
pub fn adapter_project<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet,
    cfg: &ModelConfig,
    fused: Tensor,
    task: &str,
) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
    let f = g.shape(fused)[0];
    if f == 0 {
        return Err(Error::Contract("adapter needs at least one fused token".into()));
    }
    let h = linear(g, params, FC, fused)?;
    let h = g.gelu(h);
    let p = cfg.adapter.prefix_len;
    let rows = if f > p {
        g.slice_rows(h, 0, p)?
    } else if f < p {
        let pad = g.zeros(&[p - f, cfg.adapter.hidden]);
        g.concat_rows(&[h, pad])?
    } else {
        h
    };
    let emb = params.bind(g, &task_emb_path(task))?;
    let mut out = Vec::new();
    for (i, l) in cfg.adapter.injection_layers().into_iter().enumerate() {
        let y = linear(g, params, &out_path(l), rows)?;
        let y = if i == 0 { g.add(y, emb)? } else { y };
        out.push((l, y));
    }
    Ok((h, out))
}

#[derive(Clone, Debug)]
pub struct MergedOutput {
    pub kinds: Vec<ModalityKind>,
    /// `1 × m` gate weights, aligned with `kinds`.
    pub gate_weights: Tensor,
    pub hidden: Option<Tensor>,
    pub logits: Option<Tensor>,
    /// `1 × readout_width`.
    pub readout: Tensor,
    /// `1 × out_dim`.
    pub head_out: Tensor,
}

/// Full forward of one sample for `task`, optionally followed by text.
pub fn merged_forward<T: Real>(
    g: &mut Graph<T>,
    model: &MergedModel,
    payloads: &BTreeMap<ModalityKind, Payload>,
    task: &str,
    text_ids: Option<&[usize]>,
) -> Result<MergedOutput> {
    let spec = model.task(task)?;
    if payloads.is_empty() {
        return Err(Error::Data(format!("sample for task {task} has no payloads")));
    }
    if let Some(k) = payloads.keys().find(|k| !spec.modalities.contains(k)) {
        return Err(Error::Config(format!("modality {k} is not an input of task {task}")));
    }
    let cfg = &model.config;
    let params = &model.params;
    let blocks = encode_sample(g, params, &cfg.encoder, payloads)?;
    let weights = gate_weights(g, params, task, &blocks, cfg.gate_temperature)?;
    let fused = late_fuse(g, &blocks, weights)?;
    let (features, injections) = adapter_project(g, params, cfg, fused, task)?;
    let kinds = blocks.iter().map(|b| b.0).collect();
    if cfg.direct_head {
        if text_ids.is_some() {
            return Err(Error::Config("direct-head models have no text path".into()));
        }
        let w = g.shape(features)[1];
        let pooled = g.reduce(features, ReduceKind::Mean, Some(0))?;
        let readout = g.reshape(pooled, &[1, w])?;
        let head_out = head_apply(g, params, spec, readout)?;
        return Ok(MergedOutput {
            kinds,
            gate_weights: weights,
            hidden: None,
            logits: None,
            readout,
            head_out,
        });
    }
    let gates = (0..cfg.lm.layers)
        .map(|l| params.bind(g, &gate_path(l)))
        .collect::<Result<Vec<_>>>()?;
    let p = cfg.adapter.prefix_len;
    let prefix = Prefix {
        len: p,
        injections,
        gates,
    };
    let out = lm_forward(g, params, &cfg.lm, Some(&prefix), text_ids.unwrap_or(&[]))?;
    let readout = g.slice_rows(out.hidden, p - 1, 1)?;
    let head_out = head_apply(g, params, spec, readout)?;
    Ok(MergedOutput {
        kinds,
        gate_weights: weights,
        hidden: Some(out.hidden),
        logits: out.logits,
        readout,
        head_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{GridPayload, SeqPayload};
    use crate::lm::{build_frozen_lm, StubPretrain, VOCAB_SIZE};
    use crate::tasks::registry_default;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        let lm = LMConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            max_len: 48,
            vocab_size: VOCAB_SIZE,
        };
        let mut c = ModelConfig::new(lm);
        c.encoder.d_enc = 8;
        c.adapter.hidden = 12;
        c
    }

    fn model(cfg: ModelConfig) -> MergedModel {
        let lm = build_frozen_lm(&cfg.lm, None, StubPretrain::default(), 1).unwrap();
        MergedModel::new(cfg, registry_default(), lm, 2).unwrap()
    }

    fn payload(kind: ModalityKind, seed: u64) -> Payload {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = kind.channels();
        match kind.family() {
            crate::encoders::Family::Grid => Payload::Grid(GridPayload {
                height: 16,
                width: 16,
                channels: c,
                values: (0..256 * c).map(|_| rng.random_range(0.0..1.0)).collect(),
                units: "a.u.".into(),
            }),
            crate::encoders::Family::Sequence => Payload::Seq(SeqPayload {
                steps: 128,
                channels: c,
                sample_rate_hz: 50.0,
                values: (0..128 * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }),
        }
    }

    fn gaze_sample(seed: u64) -> BTreeMap<ModalityKind, Payload> {
        [ModalityKind::Imu, ModalityKind::Image, ModalityKind::Depth]
            .into_iter()
            .enumerate()
            .map(|(i, k)| (k, payload(k, seed * 10 + i as u64)))
            .collect()
    }

    #[test]
    fn partition_is_exact() {
        let m = model(small_cfg());
        let tr = m.trainable_params();
        let lm = m.lm_params();
        assert!(tr.paths().all(|p| !lm.contains(p)));
        assert_eq!(tr.len() + lm.len(), m.params.len());
        assert_eq!(lm.frozen_paths().count(), lm.len());
        assert_eq!(m.params.trainable_paths().count(), tr.len());
        for p in tr.paths() {
            assert!(
                p.starts_with("enc.") || p.starts_with("fuse.") || p.starts_with("adapter.") || p.starts_with("task."),
                "{p}"
            );
        }
    }

    #[test]
    fn safe_start_logits_match_frozen_lm() {
        let m = model(small_cfg());
        for seed in 0..3 {
            let ids: Vec<usize> = (0..7).map(|i| (seed as usize * 31 + i * 17) % 256).collect();
            let mut g = Graph::<f32>::new();
            let out = merged_forward(&mut g, &m, &gaze_sample(seed), "gaze", Some(&ids)).unwrap();
            let merged = g.data(out.logits.unwrap()).to_vec();
            let mut g2 = Graph::<f32>::new();
            let plain = lm_forward(&mut g2, &m.params, &m.config.lm, None, &ids).unwrap();
            assert_eq!(merged, g2.data(plain.logits.unwrap()));
        }
    }

    #[test]
    fn zero_out_projection_gives_task_embedding_rows() {
        let m = model(small_cfg());
        let mut g = Graph::<f32>::new();
        let fused = g.tensor_f32(&[5, 8], &[0.3; 40], false).unwrap();
        let (_, inj) = adapter_project(&mut g, &m.params, &m.config, fused, "gaze").unwrap();
        assert_eq!(inj.len(), 1);
        assert_eq!(g.data(inj[0].1), m.params.get("task.gaze.emb").unwrap().data.as_slice());
        let (_, inj2) = adapter_project(&mut g, &m.params, &m.config, fused, "touch").unwrap();
        let delta: Vec<f32> = g.data(inj2[0].1).iter().zip(g.data(inj[0].1)).map(|(a, b)| a - b).collect();
        let emb_delta: Vec<f32> = m
            .params
            .get("task.touch.emb")
            .unwrap()
            .data
            .iter()
            .zip(&m.params.get("task.gaze.emb").unwrap().data)
            .map(|(a, b)| a - b)
            .collect();
        assert_eq!(delta, emb_delta);
    }

    #[test]
    fn frozen_paths_get_no_gradient_and_readout_width() {
        let mut m = model(small_cfg());
        // open the gates so text depends on the prefix
        for l in 0..2 {
            m.params.get_mut(&gate_path(l)).unwrap().data[0] = 0.5;
        }
        let mut g = Graph::<f32>::new();
        let out = merged_forward(&mut g, &m, &gaze_sample(1), "gaze", Some(&[1, 2, 3])).unwrap();
        assert_eq!(g.shape(out.readout), &[1, 16]);
        let ce = g.cross_entropy(out.logits.unwrap(), &[2, 3, 4], usize::MAX).unwrap();
        let head = g.sum(out.head_out);
        let both = g.concat_rows(&[ce, head]).unwrap();
        let loss = g.sum(both);
        g.backward(loss).unwrap();
        for p in m.lm_params().paths() {
            if let Some(t) = g.named(p) {
                assert!(g.grad(t).is_none_or(|v| v.iter().all(|&x| x == 0.0)), "{p}");
            }
        }
        let grads = m.params.grads_from(&g);
        assert!(grads.keys().all(|k| !k.starts_with("lm.")));
        assert!(grads["adapter.gate.0"][0] != 0.0);
    }

    #[test]
    fn trainable_count_is_small_relative_to_lm_at_desk_scale() {
        let cfg = ModelConfig::new(LMConfig::preset(crate::lm::LmPreset::Medium));
        let lm = build_frozen_lm(&cfg.lm, None, StubPretrain::default(), 1).unwrap();
        let m = MergedModel::new(cfg, registry_default(), lm, 2).unwrap();
        let tr = m.params.num_elements(Some(false));
        let fr = m.params.num_elements(Some(true));
        assert!(tr < fr, "{tr} vs {fr}");
    }

    #[test]
    fn mismatched_modality_rejected_and_direct_head() {
        let m = model(small_cfg());
        let mut s = gaze_sample(1);
        s.insert(ModalityKind::Audio, payload(ModalityKind::Audio, 9));
        let mut g = Graph::<f32>::new();
        assert!(matches!(
            merged_forward(&mut g, &m, &s, "gaze", None),
            Err(Error::Config(_))
        ));
        let mut cfg = small_cfg();
        cfg.direct_head = true;
        let m = model(cfg);
        let out = merged_forward(&mut g, &m, &gaze_sample(1), "gaze", None).unwrap();
        assert_eq!(g.shape(out.readout), &[1, 12]);
        assert!(out.logits.is_none());
    }

    #[test]
    fn per_layer_insertion() {
        let mut cfg = small_cfg();
        cfg.adapter.insertion = InsertionMode::PerLayerPrefix;
        cfg.adapter.layers = vec![0, 1];
        let m = model(cfg.clone());
        assert!(m.params.contains("adapter.out.1.w"));
        let mut g = Graph::<f32>::new();
        let ids = [5, 6, 7];
        let out = merged_forward(&mut g, &m, &gaze_sample(2), "gaze", Some(&ids)).unwrap();
        let mut g2 = Graph::<f32>::new();
        let plain = lm_forward(&mut g2, &m.params, &m.config.lm, None, &ids).unwrap();
        assert_eq!(g.data(out.logits.unwrap()), g2.data(plain.logits.unwrap()));
        cfg.adapter.layers = vec![5];
        assert!(cfg.validate().is_err());
    }
}
