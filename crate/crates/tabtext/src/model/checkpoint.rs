//! Versioned binary checkpoint format.
//!
//! Layout: 4-byte magic `TBTX`, u32 LE version, u64 LE header length, a JSON
//! header (model config, step, optional metric, tensor names and shapes in
//! order), then each tensor's f64 values little-endian in header order. The
//! loader treats input as untrusted: every length is bounded before
//! allocation and the tensor list must match the config's derived parameter
//! set exactly.

use std::io::{Read, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{param_specs, Model, ModelConfig, ModelError, Parameters, MAX_PARAMETERS};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"TBTX";
const VERSION: u32 = 1;
const MAX_HEADER_BYTES: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint header of {0} bytes exceeds limit")]
    HeaderTooLarge(u64),
    #[error("checkpoint header: {0}")]
    BadHeader(#[from] serde_json::Error),
    #[error("checkpoint config rejected: {0}")]
    BadConfig(ModelError),
    #[error("tensor list mismatch at entry {index}: expected {expected:?}, found {found:?}")]
    TensorMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("tensor {name} value {value} is not finite")]
    NonFinite { name: String, value: f64 },
    #[error("checkpoint has trailing bytes after tensor data")]
    TrailingData,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    metric: Option<f64>,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: the model plus its training bookkeeping.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub metric: Option<f64>,
}

pub fn save_checkpoint<W: Write>(
    mut w: W,
    model: &Model,
    step: u64,
    metric: Option<f64>,
) -> Result<(), CheckpointError> {
    let header = Header {
        config: model.config.clone(),
        step,
        metric,
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut buf = Vec::with_capacity(8 * 1024);
    for (_, tensor) in model.params.iter() {
        buf.clear();
        for &x in tensor.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > MAX_HEADER_BYTES {
        return Err(CheckpointError::HeaderTooLarge(header_len));
    }
    let mut header_buf = vec![0u8; header_len as usize];
    r.read_exact(&mut header_buf)?;
    let header: Header = serde_json::from_slice(&header_buf)?;
    header
        .config
        .validate()
        .map_err(CheckpointError::BadConfig)?;

    // The config bounds (validated above, parameter count capped at
    // MAX_PARAMETERS) make the derived spec list the allocation budget; the
    // header's own tensor list must match it exactly.
    let specs = param_specs(&header.config);
    if header.tensors.len() != specs.len() {
        return Err(CheckpointError::TensorMismatch {
            index: header.tensors.len().min(specs.len()),
            expected: format!("{} tensors", specs.len()),
            found: format!("{} tensors", header.tensors.len()),
        });
    }
    debug_assert!(specs.iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum::<u64>() <= MAX_PARAMETERS);
    let mut map = IndexMap::with_capacity(specs.len());
    for (index, ((name, shape), entry)) in specs.into_iter().zip(&header.tensors).enumerate() {
        if entry.name != name || entry.shape != shape {
            return Err(CheckpointError::TensorMismatch {
                index,
                expected: format!("{name} {shape:?}"),
                found: format!("{} {:?}", entry.name, entry.shape),
            });
        }
        let count: usize = shape.iter().product();
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        let mut data = Vec::with_capacity(count);
        for chunk in bytes.chunks_exact(8) {
            let value = f64::from_le_bytes(chunk.try_into().unwrap());
            if !value.is_finite() {
                return Err(CheckpointError::NonFinite { name, value });
            }
            data.push(value);
        }
        let tensor = Tensor::new(shape, data).expect("shape/length agree by construction");
        map.insert(name, tensor);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::TrailingData);
    }
    Ok(Checkpoint {
        model: Model {
            config: header.config,
            params: Parameters::from_map(map),
        },
        step: header.step,
        metric: header.metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionMode;

    fn small_model() -> Model {
        Model::new(ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab: 32,
            max_len: 8,
            window: 2,
            attention: AttentionMode::Disentangled,
            num_classes: 2,
            dropout: 0.0,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let model = small_model();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &model, 7, Some(0.5)).unwrap();
        let ckpt = load_checkpoint(buf.as_slice()).unwrap();
        for ((n1, t1), (n2, t2)) in model.params.iter().zip(ckpt.model.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let mut again = Vec::new();
        save_checkpoint(&mut again, &ckpt.model, 7, Some(0.5)).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_header_shape_tampering() {
        let model = small_model();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &model, 1, None).unwrap();
        let text = String::from_utf8_lossy(&buf).into_owned();
        assert!(text.contains("embed.rel"));
        let tampered = buf
            .windows(b"embed.rel".len())
            .position(|w| w == b"embed.rel")
            .unwrap();
        let mut bad = buf.clone();
        bad[tampered + 6] = b'x';
        assert!(matches!(
            load_checkpoint(bad.as_slice()),
            Err(CheckpointError::TensorMismatch { .. })
                | Err(CheckpointError::BadHeader(_))
        ));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let model = small_model();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &model, 1, None).unwrap();
        buf.push(0u8);
        assert!(matches!(
            load_checkpoint(buf.as_slice()),
            Err(CheckpointError::TrailingData)
        ));
    }

    #[test]
    fn rejects_oversized_header_claim() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TBTX");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            load_checkpoint(buf.as_slice()),
            Err(CheckpointError::HeaderTooLarge(_))
        ));
    }

    #[test]
    fn rejects_config_outside_supported_bounds() {
        let model = small_model();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &model, 1, None).unwrap();
        let header_start = 16;
        let old_header_len =
            u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let header =
            std::str::from_utf8(&buf[header_start..header_start + old_header_len]).unwrap();
        let patched = header.replacen("\"layers\":1", "\"layers\":9999", 1);
        assert_ne!(header, patched);
        let mut bad = Vec::new();
        bad.extend_from_slice(&buf[..8]);
        bad.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        bad.extend_from_slice(patched.as_bytes());
        bad.extend_from_slice(&buf[header_start + old_header_len..]);
        assert!(matches!(
            load_checkpoint(bad.as_slice()),
            Err(CheckpointError::BadConfig(_))
        ));
    }
}
