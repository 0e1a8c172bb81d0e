//! Checkpoint directories: `manifest.json` plus one raw blob per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{AlignDistHead, UNetModel};
use crate::tensor::{read_tensor, write_tensor, TensorDescriptor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const ALIGN_A: &str = "align.A";
pub const ALIGN_B: &str = "align.b";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auc: f64,
}

/// Position of the pair-sampling stream when the checkpoint was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// Decimal string: JSON numbers cannot portably carry 128 bits.
    #[serde(with = "decimal_u128")]
    pub word_pos: u128,
}

mod decimal_u128 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: UNetModel,
    pub head: AlignDistHead,
    pub config: RunConfig,
    /// Epoch (1-based) the weights come from; 0 means untrained.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: RunConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    rng: RngState,
    tensors: Vec<TensorDescriptor>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        for (name, t) in self.model.params() {
            tensors.push(write_tensor(dir, name, t)?);
        }
        tensors.push(write_tensor(dir, ALIGN_A, &self.head.a)?);
        tensors.push(write_tensor(dir, ALIGN_B, &self.head.b)?);
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            rng: self.rng,
            tensors,
        };
        let path = dir.join(CHECKPOINT_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                m.format_version
            )));
        }
        m.config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let find = |name: &str| -> Result<&TensorDescriptor> {
            m.tensors
                .iter()
                .find(|d| d.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
        };
        let mut params = Vec::new();
        for (name, shape) in UNetModel::param_specs(&m.config.unet) {
            let desc = find(&name)?;
            if desc.shape != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    desc.shape
                )));
            }
            params.push((name, read_tensor(dir, desc)?));
        }
        let n = m.config.unet.latent_dim;
        let mut align = Vec::new();
        for name in [ALIGN_A, ALIGN_B] {
            let desc = find(name)?;
            if desc.shape != [n] {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected [{n}]",
                    desc.shape
                )));
            }
            align.push(read_tensor(dir, desc)?.data);
        }
        let b = align.pop().unwrap();
        let a = align.pop().unwrap();
        Ok(Checkpoint {
            model: UNetModel::from_params(m.config.unet.clone(), params)?,
            head: AlignDistHead::new(a, b)?,
            config: m.config,
            epoch: m.epoch,
            history: m.history,
            rng: m.rng,
        })
    }
}
