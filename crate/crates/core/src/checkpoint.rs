//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DDRPCKPT" | u32 format version | u64 header length | header (JSON) | f64 arrays
//! ```
//!
//! The header lists every array by name and shape in storage order. Model
//! parameters use the names documented in [`crate::model`]; optimizer moments
//! follow as `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::objectives::ObjectiveWarnings;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DDRPCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Training progress stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub step_max: u64,
    pub config: TrainConfig,
    pub data_rng: RngState,
    pub aux_rng: RngState,
    pub adam_t: u64,
    pub warnings: ObjectiveWarnings,
    pub data_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainState>,
    pub arrays: Vec<ArrayEntry>,
}

/// First and second Adam moments, one vector per parameter.
pub type Moments = (Vec<Vec<f64>>, Vec<Vec<f64>>);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainState>,
    /// First and second Adam moments, aligned with the parameters.
    pub moments: Option<Moments>,
}

impl Checkpoint {
    pub fn from_model(model: Model) -> Self {
        Checkpoint { model, train: None, moments: None }
    }

    pub fn step(&self) -> u64 {
        self.train.as_ref().map_or(0, |t| t.step)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let mut arrays: Vec<ArrayEntry> =
            params.iter().map(|(n, t)| ArrayEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect();
        if self.moments.is_some() {
            for prefix in ["adam.m.", "adam.v."] {
                arrays.extend(params.iter().map(|(n, t)| ArrayEntry { name: format!("{prefix}{n}"), shape: t.shape().to_vec() }));
            }
        }
        let header = Header { format_version: FORMAT_VERSION, model: self.model.config.clone(), train: self.train.clone(), arrays };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * params.element_count() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        params.tensors().iter().for_each(|t| put(t.data()));
        if let Some((m, v)) = &self.moments {
            m.iter().chain(v).for_each(|a| put(a));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fmt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| fmt("truncated"))?;
        let json = body.get(..hlen).ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let mut data = &body[hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            let raw = data.get(..8 * n).ok_or_else(|| Error::Format(format!("array {} truncated", a.name)))?;
            let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push((a.name.clone(), Tensor::new(a.shape.clone(), vals)?));
            data = &data[8 * n..];
        }
        if !data.is_empty() {
            return Err(fmt("trailing bytes after the last array"));
        }
        let n_params = header.model.param_shapes().len();
        let moments = match arrays.len() {
            n if n == n_params => None,
            n if n == 3 * n_params => {
                let rest = arrays.split_off(n_params);
                let (m, v) = rest.split_at(n_params);
                for (i, (name, _)) in arrays.iter().enumerate() {
                    if m[i].0 != format!("adam.m.{name}") || v[i].0 != format!("adam.v.{name}") {
                        return Err(Error::Format(format!("optimizer moments out of order at {name}")));
                    }
                }
                let take = |xs: &[(String, Tensor)]| xs.iter().map(|(_, t)| t.data().to_vec()).collect();
                Some((take(m), take(v)))
            }
            n => return Err(Error::Format(format!("{n} arrays do not match {n_params} parameters"))),
        };
        let model = Model::new(header.model, ParamStore::new(arrays)?)?;
        Ok(Checkpoint { model, train: header.train, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
