use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::ScheduleSpec;
use crate::diffnum::{Array, DType, Scalar};
use crate::networks::{Network, NetworkSpec};

pub const MAGIC: &[u8; 4] = b"GDDM";
pub const FORMAT_VERSION: u8 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const EMA: &str = "ema/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u8 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("unknown dtype code {code} for tensor `{name}`")]
    UnknownDType { name: String, code: u8 },
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` is missing")]
    Missing(String),
    #[error("unexpected tensor `{0}`")]
    Unexpected(String),
    #[error("payload checksum mismatch")]
    Corrupt,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| x.write_le(out)),
            TensorData::F64(v) => v.iter().for_each(|x| x.write_le(out)),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> TensorData {
        match dtype {
            DType::F32 => TensorData::F32(bytes.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => TensorData::F64(bytes.chunks_exact(8).map(f64::read_le).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_array<F: Scalar>(name: impl Into<String>, a: &Array<F>) -> Self {
        let data = match F::DTYPE {
            DType::F32 => TensorData::F32(
                a.data()
                    .iter()
                    .map(|v| v.to_f32().unwrap_or(f32::NAN))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                a.data()
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NAN))
                    .collect(),
            ),
        };
        NamedTensor {
            name: name.into(),
            shape: a.shape().to_vec(),
            data,
        }
    }

    /// Converts to `F`, widening or narrowing if the stored dtype differs.
    pub fn to_array<F: Scalar>(&self) -> Array<F> {
        let values = self.data.to_f64();
        Array::from_f64(&self.shape, &values).expect("tensor shape validated on load")
    }
}

/// Adam moments, plus the parameter average when EMA is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
    pub ema: Option<Vec<NamedTensor>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: Option<ScheduleSpec>,
    pub network: Option<NetworkSpec>,
    pub iteration: u64,
    pub seed: u64,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: u8,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schedule: Option<ScheduleSpec>,
    network: Option<NetworkSpec>,
    iteration: u64,
    seed: u64,
    optimizer_step: Option<u64>,
    tensors: Vec<Entry>,
    payload_sha256: String,
}

impl Checkpoint {
    /// Snapshot of a network's current parameters, without optimizer state.
    pub fn from_network<F: Scalar, N: Network<F> + ?Sized>(
        net: &N,
        schedule: Option<ScheduleSpec>,
        iteration: u64,
        seed: u64,
    ) -> Self {
        Checkpoint {
            schedule,
            network: net.spec(),
            iteration,
            seed,
            params: net
                .params()
                .iter()
                .map(|(n, a)| NamedTensor::from_array(n, a))
                .collect(),
            optimizer: None,
        }
    }

    fn all_tensors(&self) -> Vec<(String, &NamedTensor)> {
        let mut out: Vec<(String, &NamedTensor)> =
            self.params.iter().map(|t| (t.name.clone(), t)).collect();
        if let Some(opt) = &self.optimizer {
            out.extend(opt.m.iter().map(|t| (format!("{ADAM_M}{}", t.name), t)));
            out.extend(opt.v.iter().map(|t| (format!("{ADAM_V}{}", t.name), t)));
            if let Some(ema) = &opt.ema {
                out.extend(ema.iter().map(|t| (format!("{EMA}{}", t.name), t)));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.all_tensors();
        let mut payload = Vec::new();
        for (_, t) in &tensors {
            t.data.write_le(&mut payload);
        }
        let header = Header {
            schedule: self.schedule,
            network: self.network.clone(),
            iteration: self.iteration,
            seed: self.seed,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    dtype: t.data.dtype().code(),
                    shape: t.shape.clone(),
                })
                .collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(9 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = *bytes
            .get(4)
            .ok_or_else(|| CheckpointError::Truncated("no version byte".into()))?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let len_bytes: [u8; 4] = bytes
            .get(5..9)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| CheckpointError::Truncated("no header length".into()))?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes
            .get(9..9 + header_len)
            .ok_or_else(|| CheckpointError::Truncated("header cut short".into()))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut dtypes = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let dt = DType::from_code(e.dtype).ok_or_else(|| CheckpointError::UnknownDType {
                name: e.name.clone(),
                code: e.dtype,
            })?;
            if e.shape.is_empty() || e.shape.contains(&0) {
                return Err(CheckpointError::Header(format!(
                    "tensor `{}` has empty shape",
                    e.name
                )));
            }
            dtypes.push(dt);
        }
        if let Some(spec) = &header.network {
            let params: Vec<&Entry> = header
                .tensors
                .iter()
                .filter(|e| !is_optimizer(&e.name))
                .collect();
            check_against_spec(
                spec,
                params.iter().map(|e| (e.name.as_str(), e.shape.as_slice())),
            )?;
        }

        let mut offset = 9 + header_len;
        let payload_start = offset;
        let mut read = Vec::with_capacity(header.tensors.len());
        for (e, &dt) in header.tensors.iter().zip(&dtypes) {
            let n: usize = e.shape.iter().product();
            let size = n * dt.size_of();
            let chunk = bytes.get(offset..offset + size).ok_or_else(|| {
                CheckpointError::Truncated(format!("payload of `{}` cut short", e.name))
            })?;
            read.push((e, TensorData::read_le(dt, chunk)));
            offset += size;
        }
        if offset != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - offset));
        }
        if hex::encode(Sha256::digest(&bytes[payload_start..])) != header.payload_sha256 {
            return Err(CheckpointError::Corrupt);
        }

        let (mut params, mut m, mut v, mut ema) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (e, data) in read {
            let (bucket, name) = if let Some(n) = e.name.strip_prefix(ADAM_M) {
                (&mut m, n)
            } else if let Some(n) = e.name.strip_prefix(ADAM_V) {
                (&mut v, n)
            } else if let Some(n) = e.name.strip_prefix(EMA) {
                (&mut ema, n)
            } else {
                (&mut params, e.name.as_str())
            };
            bucket.push(NamedTensor {
                name: name.to_string(),
                shape: e.shape.clone(),
                data,
            });
        }
        let optimizer = match header.optimizer_step {
            Some(step) => Some(OptimizerState {
                step,
                m,
                v,
                ema: (!ema.is_empty()).then_some(ema),
            }),
            None if m.is_empty() && v.is_empty() && ema.is_empty() => None,
            None => {
                return Err(CheckpointError::Header(
                    "optimizer tensors without optimizer step".into(),
                ))
            }
        };
        Ok(Checkpoint {
            schedule: header.schedule,
            network: header.network,
            iteration: header.iteration,
            seed: header.seed,
            params,
            optimizer,
        })
    }
}

fn is_optimizer(name: &str) -> bool {
    name.starts_with(ADAM_M) || name.starts_with(ADAM_V) || name.starts_with(EMA)
}

fn check_against_spec<'a>(
    spec: &NetworkSpec,
    found: impl Iterator<Item = (&'a str, &'a [usize])>,
) -> Result<()> {
    let expected = spec
        .param_shapes()
        .map_err(|e| CheckpointError::Header(format!("invalid network config: {e}")))?;
    let found: Vec<_> = found.collect();
    for (name, shape) in &found {
        match expected.iter().find(|(n, _)| n == name) {
            None => return Err(CheckpointError::Unexpected(name.to_string())),
            Some((_, s)) if s.as_slice() != *shape => {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: s.clone(),
                    found: shape.to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some((name, _)) = expected
        .iter()
        .find(|(n, _)| !found.iter().any(|(f, _)| f == n))
    {
        return Err(CheckpointError::Missing(name.clone()));
    }
    Ok(())
}

/// Writes through a sibling temporary file so readers never see a partial
/// checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, ckpt.to_bytes()).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// Copies checkpoint parameters into `net`, matching by name and shape.
pub fn restore_params<F: Scalar, N: Network<F> + ?Sized>(
    net: &mut N,
    ckpt: &Checkpoint,
) -> Result<()> {
    let store = net.params_mut();
    let names = store.names().to_vec();
    for t in &ckpt.params {
        if !names.contains(&t.name) {
            return Err(CheckpointError::Unexpected(t.name.clone()));
        }
    }
    for (name, value) in names.iter().zip(store.values_mut()) {
        let t = ckpt
            .params
            .iter()
            .find(|t| &t.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if t.shape != value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: value.shape().to_vec(),
                found: t.shape.clone(),
            });
        }
        *value = t.to_array();
    }
    Ok(())
}
