//! Binary checkpoints.
//!
//! Layout: magic `IOTLM1\0`, u32 version, u32-length-prefixed TOML header,
//! parameter table, optimizer table (`m.<path>`, `v.<path>`). Integers and
//! reals are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{MergedModel, ModelConfig};
use crate::digest::fnv1a64_hex;
use crate::error::{Error, Result};
use crate::lm::LM_PREFIX;
use crate::nn::params::read_table;
use crate::nn::wire::{put_str, put_u32, Reader};
use crate::nn::{AdamConfig, AdamState, ParamSet};
use crate::tasks::TaskSpec;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 7] = b"IOTLM1\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Training stage that produced the checkpoint (`init`, `pretrain`, `tune`, ...).
    pub stage: String,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub adam: AdamConfig,
    pub adam_step: u64,
    /// Digest of the serialized `lm.*` parameter table.
    pub frozen_digest: String,
    /// Digest of the training log of the producing run.
    pub log_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
    pub opt: AdamState,
}

/// Digest of the frozen LM section of `params`.
pub fn frozen_digest(params: &ParamSet) -> String {
    fnv1a64_hex(&params.filter(|p| p.starts_with(LM_PREFIX)).serialize())
}

impl Checkpoint {
    pub fn new(model: &MergedModel, opt: &AdamState, train: &TrainConfig, stage: &str, log_json: &str) -> Self {
        Self {
            header: CheckpointHeader {
                stage: stage.into(),
                train: train.clone(),
                model: model.config.clone(),
                tasks: model.tasks.clone(),
                adam: opt.config,
                adam_step: opt.step,
                frozen_digest: frozen_digest(&model.params),
                log_digest: fnv1a64_hex(log_json.as_bytes()),
            },
            params: model.params.clone(),
            opt: opt.clone(),
        }
    }

    pub fn model(&self) -> MergedModel {
        MergedModel {
            config: self.header.model.clone(),
            tasks: self.header.tasks.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &toml::to_string(&self.header).expect("header serialises"));
        out.extend(self.params.serialize());
        out.extend(self.opt.to_params().serialize());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format("not a checkpoint: bad magic bytes"));
        }
        let mut r = Reader::new(&bytes[MAGIC.len()..]);
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let text = r.string("header")?;
        let header: CheckpointHeader =
            toml::from_str(&text).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let mut params = read_table(&mut r)?;
        let opt_table = read_table(&mut r)?;
        if r.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes after checkpoint", r.remaining())));
        }
        params.freeze_prefix(LM_PREFIX);
        if frozen_digest(&params) != header.frozen_digest {
            return Err(Error::format("frozen LM section does not match its recorded digest"));
        }
        let opt = AdamState::from_params(header.adam, header.adam_step, &opt_table)?;
        Ok(Self { header, params, opt })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{build_frozen_lm, StubPretrain};
    use crate::tasks::registry_default;

    fn sample() -> Checkpoint {
        let train = TrainConfig::default();
        let mut mc = train.model_config();
        mc.lm.d_model = 16;
        mc.lm.heads = 2;
        mc.encoder.d_enc = 8;
        mc.adapter.hidden = 8;
        let lm = build_frozen_lm(&mc.lm, None, StubPretrain::default(), 3).unwrap();
        let model = MergedModel::new(mc, registry_default()[..2].to_vec(), lm, 3).unwrap();
        let mut opt = AdamState::new(train.adam());
        opt.step = 4;
        opt.m.insert("adapter.fc.b".into(), vec![0.5; 8]);
        opt.v.insert("adapter.fc.b".into(), vec![0.25; 8]);
        Checkpoint::new(&model, &opt, &train, "init", "{}")
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.params.frozen_paths().all(|p| p.starts_with(LM_PREFIX)));
        assert_eq!(back.model().trainable_params().len(), c.model().trainable_params().len());
    }

    #[test]
    fn header_checks() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut v2 = bytes.clone();
        v2[7..11].copy_from_slice(&2u32.to_le_bytes());
        let msg = Checkpoint::from_bytes(&v2).unwrap_err().to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
        for cut in [3, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn tampered_frozen_section_is_rejected() {
        let mut c = sample();
        c.params.get_mut("lm.ln_f.g").unwrap().data[0] += 1.0;
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
