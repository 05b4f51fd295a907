use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::conditioner::{Conditioner, ConditionerConfig};
use crate::error::{Error, Result};
use crate::models::{Component, Models};
use crate::numerics::{params_hex, Adam, AdamConfig, ParamStore, Tensor};
use crate::objectives::MseHead;
use crate::rng::stream;
use crate::velocity::{VelocityConfig, VelocityNet};
use crate::world::{PixelCodec, SemanticDecoder, World, WorldConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"B3OCKPT1";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub models: Models,
    pub optimizer: Adam,
    /// Optimizer steps taken across all stages.
    pub step: u64,
    /// Configuration of the most recent stage.
    pub config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    shape: Vec<usize>,
    m_offset: usize,
    v_offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    world: WorldConfig,
    conditioner: ConditionerConfig,
    velocity: Option<VelocityConfig>,
    decoder_resolution: Option<usize>,
    mse_head: bool,
    codec: PixelCodec,
    trained: Vec<Component>,
    step: u64,
    config: Option<TrainConfig>,
    config_hash: Option<String>,
    backbone_hash: String,
    adam: AdamConfig,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
    moments: Vec<MomentEntry>,
}

/// SHA-256 of the canonical JSON form of `cfg`.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    params_hex(&Sha256::digest(bytes))
}

impl Checkpoint {
    /// Untrained models for `world` with a fresh optimizer.
    pub fn fresh(world: &World, seed: u64) -> Result<Self> {
        Ok(Self {
            models: Models::new(world, ConditionerConfig::default(), seed)?,
            optimizer: Adam::new(AdamConfig::default()),
            step: 0,
            config: None,
        })
    }

    pub fn backbone_hash(&self) -> String {
        self.models.backbone_hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.models.store;
        let mut data: Vec<f32> = Vec::with_capacity(store.num_scalars());
        let mut tensors = Vec::with_capacity(store.len());
        for id in store.ids() {
            let v = store.value(id);
            tensors.push(TensorEntry {
                name: store.name(id).to_string(),
                shape: v.shape().to_vec(),
                offset: data.len(),
                frozen: store.is_frozen(id),
            });
            data.extend_from_slice(v.data());
        }
        let mut moments = Vec::new();
        for (name, (m, v)) in self.optimizer.moments() {
            let m_offset = data.len();
            data.extend_from_slice(m.data());
            let v_offset = data.len();
            data.extend_from_slice(v.data());
            moments.push(MomentEntry {
                name: name.clone(),
                shape: m.shape().to_vec(),
                m_offset,
                v_offset,
            });
        }
        let m = &self.models;
        let manifest = Manifest {
            world: m.world,
            conditioner: m.conditioner.cfg,
            velocity: m.velocity.as_ref().map(|n| n.cfg),
            decoder_resolution: m.decoder.as_ref().map(|d| d.res),
            mse_head: m.mse_head.is_some(),
            codec: m.codec,
            trained: m.trained.iter().copied().collect(),
            step: self.step,
            config: self.config.clone(),
            config_hash: self.config.as_ref().map(config_hash),
            backbone_hash: self.backbone_hash(),
            adam: self.optimizer.cfg,
            adam_step: self.optimizer.steps_taken(),
            tensors,
            moments,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(17 + json.len() + 4 * data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 17 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if bytes[8] != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", bytes[8])));
        }
        let json_len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(17..17 + json_len)
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        let raw = &bytes[17 + json_len..];
        if raw.len() % 4 != 0 {
            return Err(Error::Format("tensor data is not a whole number of f32 values".into()));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let read = |shape: &[usize], offset: usize| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let slice = data
                .get(offset..offset + n)
                .ok_or_else(|| Error::Format("tensor extends past end of file".into()))?;
            Tensor::new(shape.to_vec(), slice.to_vec())
        };

        let mut store = ParamStore::new();
        for t in &manifest.tensors {
            let id = store.insert(t.name.clone(), read(&t.shape, t.offset)?)?;
            store.set_frozen(id, t.frozen);
        }
        let mut moments = BTreeMap::new();
        for m in &manifest.moments {
            moments.insert(m.name.clone(), (read(&m.shape, m.m_offset)?, read(&m.shape, m.v_offset)?));
        }
        let n_params = store.len();

        // rebinding draws from an rng but inserts nothing when every name exists
        let mut rng = stream(0, 0);
        let conditioner = Conditioner::new(&mut store, manifest.conditioner, &mut rng)?;
        let mse_head = if manifest.mse_head {
            Some(MseHead::new(&mut store, manifest.conditioner.d_model, &mut rng)?)
        } else {
            None
        };
        let velocity = manifest
            .velocity
            .map(|cfg| VelocityNet::new(&mut store, cfg, &mut rng))
            .transpose()?;
        let decoder = manifest
            .decoder_resolution
            .map(|res| SemanticDecoder::new(&mut store, res, &mut rng))
            .transpose()?;
        if store.len() != n_params {
            return Err(Error::Format("checkpoint is missing parameter blocks for its components".into()));
        }
        let models = Models {
            world: manifest.world,
            store,
            conditioner,
            mse_head,
            velocity,
            decoder,
            codec: manifest.codec,
            trained: manifest.trained.into_iter().collect(),
        };
        if models.backbone_hash() != manifest.backbone_hash {
            return Err(Error::Format("backbone hash does not match stored values".into()));
        }
        if let (Some(cfg), Some(h)) = (&manifest.config, &manifest.config_hash) {
            if &config_hash(cfg) != h {
                return Err(Error::Format("config hash does not match stored config".into()));
            }
        }
        Ok(Self {
            models,
            optimizer: Adam::restore(manifest.adam, manifest.adam_step, moments),
            step: manifest.step,
            config: manifest.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
