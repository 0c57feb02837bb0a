use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterSet;
use crate::error::{Error, Result};
use crate::learner::KLScale;
use crate::world_model::{ModelConfig, WorldModel};

const MAGIC: &[u8; 4] = b"BMPK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    env: String,
    env_steps: u64,
    update_steps: u64,
    scale: KLScale,
    model: BTreeMap<String, String>,
}

/// Online and target parameters with enough metadata to rebuild the model.
#[derive(Clone)]
pub struct Checkpoint {
    pub env: String,
    pub env_steps: u64,
    pub update_steps: u64,
    pub scale: KLScale,
    pub model_config: ModelConfig,
    pub params: ParameterSet,
    pub target: ParameterSet,
}

impl Checkpoint {
    pub fn model(&self) -> Result<WorldModel> {
        WorldModel::from_params(self.model_config.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            env: self.env.clone(),
            env_steps: self.env_steps,
            update_steps: self.update_steps,
            scale: self.scale,
            model: self.model_config.to_kv(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for p in [&self.params, &self.target] {
            let mut frame = Vec::new();
            p.write_to(&mut frame)?;
            buf.extend_from_slice(&(frame.len() as u64).to_le_bytes());
            buf.extend_from_slice(&frame);
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        if &body[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
            pos += n;
            Ok(s)
        };
        let hlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(hlen)?)?;
        let mut frames = Vec::new();
        for _ in 0..2 {
            let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
            frames.push(ParameterSet::read_from(&mut take(n)?)?);
        }
        let target = frames.pop().expect("two frames");
        let params = frames.pop().expect("two frames");
        let model_config = ModelConfig::from_kv(&header.model)?;
        let ckpt = Self {
            env: header.env,
            env_steps: header.env_steps,
            update_steps: header.update_steps,
            scale: header.scale,
            model_config,
            params,
            target,
        };
        ckpt.model()?;
        if !ckpt.params.same_layout(&ckpt.target) {
            return Err(Error::Format("target layout differs from online layout".into()));
        }
        Ok(ckpt)
    }

    /// Write atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
