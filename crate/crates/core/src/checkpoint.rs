//! Single-file binary checkpoint: magic, version, JSON header, then named
//! f64 parameter arrays, all little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ColorizationModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"IACK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    pub step: usize,
    /// Schedule constants at save time, checked again on load.
    pub betas: Vec<f64>,
    pub alphas_bar: Vec<f64>,
    /// Instance count seen in training, if uniform.
    #[serde(default)]
    pub train_instances: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor64 {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: BTreeMap<String, Tensor64>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &ColorizationModel, seed: u64, step: usize) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, var) in model.store.vars() {
            params.insert(
                name.clone(),
                Tensor64 {
                    shape: var.dims().to_vec(),
                    values: model.store.values(&name)?,
                },
            );
        }
        Ok(Self {
            header: CheckpointHeader {
                version: VERSION,
                model: model.config,
                seed,
                step,
                betas: model.schedule.betas.clone(),
                alphas_bar: model.schedule.alphas_bar.clone(),
                train_instances: None,
            },
            params,
        })
    }

    /// Rebuilds the model and loads every parameter.
    pub fn to_model(&self, dtype: DType) -> Result<ColorizationModel> {
        let model = ColorizationModel::new(self.header.model, self.header.seed, dtype)?;
        if model.schedule.betas != self.header.betas || model.schedule.alphas_bar != self.header.alphas_bar {
            return Err(bad("schedule constants differ from the stored ones"));
        }
        let names = model.store.names();
        if names.len() != self.params.len() || names.iter().any(|n| !self.params.contains_key(n)) {
            return Err(bad("parameter set does not match the model configuration"));
        }
        for (name, var) in model.store.vars() {
            let p = &self.params[&name];
            if var.dims() != p.shape.as_slice() {
                return Err(bad(format!(
                    "parameter `{name}` has shape {:?}, checkpoint stores {:?}",
                    var.dims(),
                    p.shape
                )));
            }
            model.store.set_values(&name, &p.values)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u64).to_le_bytes());
            for d in &p.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let hlen = read_len(&mut r, bytes.len())?;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf).map_err(|_| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
        if header.version != version {
            return Err(bad("header version disagrees with file version"));
        }
        let count = read_len(&mut r, bytes.len())?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let nlen = read_len(&mut r, bytes.len())?;
            let mut nbuf = vec![0u8; nlen];
            r.read_exact(&mut nbuf).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(nbuf).map_err(|_| bad("parameter name is not UTF-8"))?;
            let rank = read_len(&mut r, bytes.len())?;
            let shape = (0..rank)
                .map(|_| read_len(&mut r, usize::MAX))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.saturating_mul(8) > bytes.len() {
                return Err(bad(format!("parameter `{name}` larger than the file")));
            }
            let mut values = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(|_| bad("truncated parameter data"))?;
                values.push(f64::from_le_bytes(b));
            }
            params.insert(name, Tensor64 { shape, values });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after parameters"));
        }
        Ok(Self { header, params })
    }

    /// Writes through a temporary file and renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_len(r: &mut Cursor<&[u8]>, limit: usize) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated file"))?;
    let v = u64::from_le_bytes(b);
    if v > limit as u64 {
        return Err(bad(format!("length field {v} exceeds file size")));
    }
    Ok(v as usize)
}
