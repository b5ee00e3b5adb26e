//! Single-file binary checkpoints.
//!
//! Layout (little-endian): magic `ISVCKPT1`, `u32` schema version, `u64`
//! config hash, then a JSON metadata section and named tensor blobs, each
//! followed by its CRC32.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, TrainConfig};
use super::trainer::{TrainState, Trainer};
use crate::encoder::RoutingMode;
use crate::error::{Error, Result};
use crate::nn::Adam;

pub const MAGIC: &[u8; 8] = b"ISVCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Identifies the architecture a checkpoint's tensors belong to.
pub fn config_hash(model: &ModelConfig, mode: RoutingMode) -> u64 {
    let text = serde_json::to_string(&(model, mode)).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub state: TrainState,
    pub adam_steps: [u64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl Blob {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            other => return Err(Error::Config(format!("cannot checkpoint dtype {other:?}"))),
        };
        Ok(Self {
            dtype: t.dtype(),
            dims: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let t = match self.dtype {
            DType::F32 => {
                let v: Vec<f32> = self.data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, self.dims.as_slice(), &Device::Cpu)?
            }
            DType::F64 => {
                let v: Vec<f64> = self.data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, self.dims.as_slice(), &Device::Cpu)?
            }
            other => return Err(Error::Config(format!("unsupported dtype {other:?}"))),
        };
        Ok(t)
    }
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 2,
        _ => 0,
    }
}

fn dtype_from(code: u8) -> Result<DType> {
    match code {
        1 => Ok(DType::F32),
        2 => Ok(DType::F64),
        c => Err(Error::malformed("checkpoint", format!("unknown dtype code {c}"))),
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub meta: CheckpointMeta,
    pub blobs: BTreeMap<String, Blob>,
}

const OPT_NAMES: [&str; 3] = ["g", "dim", "dst"];

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Result<Self> {
        let mut blobs = BTreeMap::new();
        for (name, var) in trainer.model.store.params() {
            blobs.insert(format!("param/{name}"), Blob::from_tensor(var.as_tensor())?);
        }
        for (name, var) in trainer.model.store.buffers() {
            blobs.insert(format!("buffer/{name}"), Blob::from_tensor(var.as_tensor())?);
        }
        for (opt_name, opt) in OPT_NAMES.iter().zip(trainer.optimizers()) {
            for (name, m, v) in opt.moments() {
                blobs.insert(format!("adam/{opt_name}/{name}/m"), Blob::from_tensor(m)?);
                blobs.insert(format!("adam/{opt_name}/{name}/v"), Blob::from_tensor(v)?);
            }
        }
        let mut state = trainer.state.clone();
        state.rng = trainer.rng_state();
        let [g, dim, dst] = trainer.optimizers();
        Ok(Self {
            config_hash: config_hash(&trainer.model.config, trainer.config.routing_mode),
            meta: CheckpointMeta {
                train: trainer.config.clone(),
                model: trainer.model.config,
                state,
                adam_steps: [g.steps(), dim.steps(), dst.steps()],
            },
            blobs,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::malformed("checkpoint metadata", e))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&crc32fast::hash(&meta).to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, blob) in &self.blobs {
            let start = out.len();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype_code(blob.dtype));
            out.extend_from_slice(&(blob.dims.len() as u32).to_le_bytes());
            for &d in &blob.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(blob.data.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob.data);
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::malformed("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let stored_hash = r.u64()?;
        let meta_len = r.u64()? as usize;
        let meta_bytes = r.take(meta_len)?;
        if r.u32()? != crc32fast::hash(meta_bytes) {
            return Err(Error::Checksum("checkpoint metadata".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes).map_err(|e| Error::malformed("checkpoint metadata", e))?;
        if config_hash(&meta.model, meta.train.routing_mode) != stored_hash {
            return Err(Error::Checksum("checkpoint config hash".into()));
        }
        let count = r.u32()?;
        let mut blobs = BTreeMap::new();
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::malformed("checkpoint blob name", e))?;
            let code = r.u8()?;
            let ndims = r.u32()? as usize;
            let dims = (0..ndims).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data_len = r.u64()? as usize;
            let data = r.take(data_len)?.to_vec();
            let crc = crc32fast::hash(&bytes[start..r.pos]);
            if r.u32()? != crc {
                return Err(Error::Checksum(format!("checkpoint blob {name}")));
            }
            let dtype = dtype_from(code)?;
            let expected = dims.iter().product::<usize>() * dtype.size_in_bytes();
            if expected != data.len() {
                return Err(Error::malformed("checkpoint", format!("blob {name} has {} bytes, expected {expected}", data.len())));
            }
            blobs.insert(name, Blob { dtype, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::malformed("checkpoint", "trailing bytes"));
        }
        Ok(Self {
            config_hash: stored_hash,
            meta,
            blobs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn tensor(&self, key: &str, like: &Tensor) -> Result<Tensor> {
        let blob = self
            .blobs
            .get(key)
            .ok_or_else(|| Error::malformed("checkpoint", format!("missing {key}")))?;
        if blob.dims != like.dims() || blob.dtype != like.dtype() {
            return Err(Error::Shape(format!(
                "{key}: checkpoint has {:?} {:?}, model expects {:?} {:?}",
                blob.dtype,
                blob.dims,
                like.dtype(),
                like.dims()
            )));
        }
        blob.to_tensor()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::malformed("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Trainer {
    pub fn optimizers(&self) -> [&Adam; 3] {
        [&self.opt_g, &self.opt_dim, &self.opt_dst]
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.state.rng = self.rng_state();
        Checkpoint::capture(self)?.write(path)
    }

    /// A trainer rebuilt from `ckpt`, ready to continue where it stopped.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut trainer = Trainer::new(ckpt.meta.train.clone(), ckpt.meta.model)?;
        trainer.apply(ckpt)?;
        Ok(trainer)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Overwrites parameters, buffers, moments and state with `ckpt`.
    /// Every tensor is validated before anything is modified.
    pub fn apply(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let own = config_hash(&self.model.config, self.config.routing_mode);
        if own != ckpt.config_hash {
            return Err(Error::Config("checkpoint was written for a different architecture".into()));
        }
        let mut vars = Vec::new();
        for (name, var) in self.model.store.params() {
            vars.push((var.clone(), ckpt.tensor(&format!("param/{name}"), var.as_tensor())?));
        }
        for (name, var) in self.model.store.buffers() {
            vars.push((var.clone(), ckpt.tensor(&format!("buffer/{name}"), var.as_tensor())?));
        }
        let mut moments: Vec<BTreeMap<String, (Tensor, Tensor)>> = Vec::new();
        for (opt_name, opt) in OPT_NAMES.iter().zip(self.optimizers()) {
            let mut map = BTreeMap::new();
            for (name, var) in opt.params() {
                let m = ckpt.tensor(&format!("adam/{opt_name}/{name}/m"), var.as_tensor())?;
                let v = ckpt.tensor(&format!("adam/{opt_name}/{name}/v"), var.as_tensor())?;
                map.insert(name.clone(), (m, v));
            }
            moments.push(map);
        }
        for (var, value) in vars {
            var.set(&value)?;
        }
        let steps = ckpt.meta.adam_steps;
        let mut moments = moments.into_iter();
        for (opt, steps) in [&mut self.opt_g, &mut self.opt_dim, &mut self.opt_dst].into_iter().zip(steps) {
            let mut map = moments.next().expect("three optimizers");
            opt.restore(steps, |name| map.remove(name))?;
        }
        self.config = ckpt.meta.train.clone();
        self.state = ckpt.meta.state.clone();
        self.set_rng(self.state.rng.restore());
        let lrs = self.state.lrs;
        self.opt_g.lr = lrs.g;
        self.opt_dim.lr = lrs.dim;
        self.opt_dst.lr = lrs.dst;
        Ok(())
    }
}
