//! Single-file checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "DTCK"
//! version    u32
//! header_len u64
//! header     header_len bytes of UTF-8 JSON (CheckpointHeader)
//! count      u32
//! count × tensor:
//!   name_len u32, name (UTF-8)
//!   dtype    u8 (0 = f32, 1 = f64)
//!   ndim     u32, dims ndim × u64
//!   data     product(dims) elements, row-major
//! ```
//!
//! Parameter names carry their network prefix (`text.`, `damsm.`, `gen.`,
//! `disc.`, `oracle.`); buffers start with `@`; optimizer slots with `adam.`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DtcError, Result};
use crate::evaluator::AttributeAccuracy;
use crate::nn::{Adam, ParamStore};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"DTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Text and image encoders (plus the oracle) after pretraining.
    Damsm,
    /// Everything, including generator and discriminator.
    Gan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub crate_version: String,
    pub kind: CheckpointKind,
    pub config: TrainConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub step: usize,
    pub vocab: Vocabulary,
    #[serde(default)]
    pub oracle_validation: Option<AttributeAccuracy>,
}

impl CheckpointHeader {
    pub fn new(kind: CheckpointKind, config: &TrainConfig, vocab: &Vocabulary) -> Self {
        CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            kind,
            config: config.clone(),
            config_hash: config.hash(),
            epoch: 0,
            step: 0,
            vocab: vocab.clone(),
            oracle_validation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    tensors: BTreeMap<String, StoredTensor>,
}

fn corrupt(msg: impl Into<String>) -> DtcError {
    DtcError::Checkpoint(msg.into())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| corrupt(format!("truncated archive: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().expect("8 bytes")))
}

fn decode<T: Scalar>(shape: &[usize], bytes: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

const MAX_NAME: u32 = 4096;
const MAX_NDIM: u32 = 8;

impl Checkpoint {
    pub fn new(header: CheckpointHeader) -> Self {
        Checkpoint {
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), StoredTensor::from_tensor(t));
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        self.tensors.get(name).map(StoredTensor::to_tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Adds every parameter and buffer of `store` under `prefix`.
    pub fn insert_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.named_tensors() {
            self.insert(format!("{prefix}{name}"), &t);
        }
    }

    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        store.load_from(|name| self.get(&format!("{prefix}{name}")))
    }

    pub fn insert_adam<T: Scalar>(&mut self, prefix: &str, opt: &Adam<T>) {
        for (name, t) in opt.state() {
            self.insert(format!("adam.{prefix}.{name}"), &t);
        }
    }

    pub fn load_adam<T: Scalar>(&self, prefix: &str, opt: &mut Adam<T>) -> Result<()> {
        opt.load_state(|name| self.get(&format!("adam.{prefix}.{name}")))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.dtype().code()])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            buf.clear();
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut buf)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut buf)),
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        if read_exact(r, 4)? != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(r)?;
        let header: CheckpointHeader = serde_json::from_slice(&read_exact(r, len as usize)?)?;
        let count = read_u32(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)?;
            if name_len > MAX_NAME {
                return Err(corrupt("tensor name too long"));
            }
            let name = String::from_utf8(read_exact(r, name_len as usize)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let dtype = DType::from_code(read_exact(r, 1)?[0])
                .ok_or_else(|| corrupt(format!("tensor {name}: unknown dtype")))?;
            let ndim = read_u32(r)?;
            if ndim > MAX_NDIM {
                return Err(corrupt(format!("tensor {name}: {ndim} dimensions")));
            }
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("tensor {name}: size overflow")))?;
            let bytes = read_exact(r, numel * dtype.size())?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(decode(&shape, &bytes)?),
                DType::F64 => StoredTensor::F64(decode(&shape, &bytes)?),
            };
            tensors.insert(name, t);
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }

    /// Identity of the model weights: SHA-256 over the parameter tensors
    /// (optimizer slots excluded).
    pub fn model_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| !n.starts_with("adam.")) {
            h.update(name.as_bytes());
            buf.clear();
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut buf)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut buf)),
            }
            h.update(&buf);
        }
        format!("{:x}", h.finalize())
    }
}
