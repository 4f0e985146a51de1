//! Single-file checkpoints: magic, format version, a JSON header and a
//! little-endian `f64` blob holding the weights and optimizer moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::network::Network;
use crate::optim::{Adam, AdamConfig};
use crate::ModelError;

pub const MAGIC: &[u8; 8] = b"VPOSECK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub m_offset: usize,
    pub v_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub cfg: AdamConfig,
    pub step: u64,
    pub moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub registry_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Caller-defined state, e.g. the training configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerHeader>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub network: Network,
    pub optimizer: Option<Adam>,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn push_tensor(blob: &mut Vec<f64>, t: &Tensor) -> Result<usize, ModelError> {
    let offset = blob.len();
    blob.extend(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    Ok(offset)
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(
    path: &Path,
    net: &Network,
    optimizer: Option<&Adam>,
    registry_hash: &str,
    epoch: usize,
    extra: serde_json::Value,
) -> Result<(), ModelError> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, var, trainable) in net.params.iter() {
        let offset = push_tensor(&mut blob, var.as_tensor())?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: var.shape().dims().to_vec(),
            trainable,
            offset,
        });
    }
    let optimizer = match optimizer {
        Some(opt) => {
            let mut moments = Vec::new();
            for (i, name) in net.params.names().iter().enumerate() {
                if let (Some(m), Some(v)) = (&opt.m[i], &opt.v[i]) {
                    let m_offset = push_tensor(&mut blob, m)?;
                    let v_offset = push_tensor(&mut blob, v)?;
                    moments.push(MomentEntry {
                        name: name.clone(),
                        m_offset,
                        v_offset,
                    });
                }
            }
            Some(OptimizerHeader {
                cfg: opt.cfg,
                step: opt.step,
                moments,
            })
        }
        None => None,
    };
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        config: net.cfg.clone(),
        registry_hash: registry_hash.to_string(),
        epoch,
        extra,
        tensors,
        optimizer,
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(20 + json.len() + blob.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let io = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader, ModelError> {
    Ok(parse(path)?.0)
}

fn parse(path: &Path) -> Result<(CheckpointHeader, Vec<f64>), ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(path, format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    let rest = &bytes[20 + len..];
    if rest.len() % 8 != 0 {
        return Err(corrupt(path, "blob length is not a multiple of 8"));
    }
    let blob: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, blob))
}

fn slice<'a>(path: &Path, blob: &'a [f64], offset: usize, len: usize) -> Result<&'a [f64], ModelError> {
    blob.get(offset..offset + len)
        .ok_or_else(|| corrupt(path, "tensor extends past the end of the blob"))
}

/// Loads a checkpoint, rebuilding the network in `dtype`.
pub fn load_checkpoint(path: &Path, dtype: DType) -> Result<Checkpoint, ModelError> {
    let (header, blob) = parse(path)?;
    let mut net = Network::new(header.config.clone(), 0, dtype).map_err(|e| corrupt(path, e.to_string()))?;
    if net.params.len() != header.tensors.len() {
        return Err(corrupt(path, "tensor list does not match the configuration"));
    }
    for t in &header.tensors {
        let var = net.params.var(&t.name).map_err(|e| corrupt(path, e.to_string()))?;
        if var.shape().dims() != t.shape.as_slice() {
            return Err(corrupt(path, format!("{}: shape {:?} vs {:?}", t.name, t.shape, var.shape())));
        }
        let n = t.shape.iter().product();
        net.params.set_values(&t.name, slice(path, &blob, t.offset, n)?)?;
    }
    let optimizer = match &header.optimizer {
        Some(o) => {
            let mut opt = Adam::new(o.cfg, &net.params);
            opt.step = o.step;
            for e in &o.moments {
                let i = net
                    .params
                    .names()
                    .iter()
                    .position(|n| n == &e.name)
                    .ok_or_else(|| corrupt(path, format!("moment for unknown tensor {}", e.name)))?;
                let var = net.params.var(&e.name)?;
                let n = var.elem_count();
                let load = |off| -> Result<Tensor, ModelError> {
                    Ok(Tensor::from_slice(slice(path, &blob, off, n)?, var.shape(), net.params.device())?)
                };
                opt.m[i] = Some(load(e.m_offset)?);
                opt.v[i] = Some(load(e.v_offset)?);
            }
            Some(opt)
        }
        None => None,
    };
    net.cfg = header.config.clone();
    Ok(Checkpoint {
        header,
        network: net,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_and_moments_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let net = Network::new(ModelConfig::desk(2), 3, DType::F32).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &net.params);
        opt.step = 7;
        let i = net.params.names().iter().position(|n| n == "head.t.z.b").unwrap();
        opt.m[i] = Some(Tensor::new(&[0.25f64, -1.5], net.params.device()).unwrap());
        opt.v[i] = Some(Tensor::new(&[1e-9f64, 2.0], net.params.device()).unwrap());
        save_checkpoint(&path, &net, Some(&opt), "abc", 4, serde_json::json!({"k": 1})).unwrap();

        let ck = load_checkpoint(&path, DType::F32).unwrap();
        assert_eq!(ck.header.epoch, 4);
        assert_eq!(ck.header.registry_hash, "abc");
        assert_eq!(ck.header.extra["k"], 1);
        for name in net.params.names() {
            assert_eq!(net.params.values_f64(name).unwrap(), ck.network.params.values_f64(name).unwrap());
        }
        let o = ck.optimizer.unwrap();
        assert_eq!(o.step, 7);
        assert_eq!(o.m[i].as_ref().unwrap().to_vec1::<f64>().unwrap(), vec![0.25, -1.5]);
        assert!(o.m[0].is_none());
    }

    #[test]
    fn corrupt_files_give_structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"hello").unwrap();
        assert!(matches!(load_checkpoint(&path, DType::F32), Err(ModelError::Checkpoint { .. })));

        let net = Network::new(ModelConfig::desk(1), 0, DType::F32).unwrap();
        save_checkpoint(&path, &net, None, "h", 0, serde_json::Value::Null).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 12);
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, DType::F32).unwrap_err();
        assert!(err.to_string().contains("bad.ckpt"), "{err}");

        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path, DType::F32).unwrap_err().to_string().contains("version"));
    }
}
