//! The `STRN` checkpoint format.
//!
//! Layout: magic `STRN`, little-endian `u32 version`, `u32` length-prefixed
//! JSON metadata block (model config, normalization stats, external schema),
//! `u32 tensor count`, then per tensor: `u16` name length, name bytes,
//! `u8` rank, `u32` per dimension, and the data as little-endian `f64`.
//! Tensors round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::FormatError;
use crate::external::ExternalSchema;
use crate::model::{ModelConfig, ParameterSet};
use crate::norm::NormStats;
use crate::tensor::Tensor;

const STRN_MAGIC: [u8; 4] = *b"STRN";
const STRN_VERSION: u32 = 1;

/// Everything needed to run the model besides the weights themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub stats: NormStats,
    #[serde(default)]
    pub ext_schema: Option<ExternalSchema>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterSet,
}

impl Checkpoint {
    /// Short content fingerprint (FNV-1a over the serialized bytes), used to
    /// tag forecasts with the model that produced them.
    pub fn id(&self) -> String {
        let bytes = self.to_bytes();
        format!("{:016x}", fnv1a(&bytes))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&STRN_MAGIC);
        out.extend_from_slice(&STRN_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.rank() as u8);
            for &dim in tensor.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Checkpoint, FormatError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, context: &'static str| -> Result<&[u8], FormatError> {
            if *pos + n > data.len() {
                return Err(FormatError::Truncated { context });
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic: [u8; 4] = take(&mut pos, 4, "magic")?.try_into().unwrap();
        if magic != STRN_MAGIC {
            return Err(FormatError::BadMagic {
                expected: STRN_MAGIC,
                got: magic,
            });
        }
        let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
        if version != STRN_VERSION {
            return Err(FormatError::VersionMismatch {
                file: version,
                supported: STRN_VERSION,
            });
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4, "meta length")?.try_into().unwrap());
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut pos, meta_len as usize, "meta")?)?;
        let count = u32::from_le_bytes(take(&mut pos, 4, "tensor count")?.try_into().unwrap());
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().unwrap());
            let name = String::from_utf8(take(&mut pos, name_len as usize, "name")?.to_vec())
                .map_err(|e| FormatError::Malformed {
                    context: "tensor name",
                    reason: e.to_string(),
                })?;
            let rank = take(&mut pos, 1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4, "dim")?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut pos, 8 * n, "tensor data")?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, values).map_err(|e| FormatError::Malformed {
                context: "tensor",
                reason: e.to_string(),
            })?;
            entries.push((name, tensor));
        }
        if pos != data.len() {
            return Err(FormatError::Malformed {
                context: "checkpoint",
                reason: format!("{} trailing bytes", data.len() - pos),
            });
        }
        Ok(Checkpoint {
            meta,
            params: ParameterSet::from_entries(entries),
        })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<(), FormatError> {
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(&checkpoint.to_bytes())?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, FormatError> {
    let mut data = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut data)?;
    Checkpoint::from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, FusionKind};

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            rows: 3,
            cols: 4,
            closeness_len: 2,
            period_len: 1,
            trend_len: 0,
            period: 4,
            trend_span: 8,
            residual_units: 1,
            filters: 3,
            kernel: 3,
            use_batch_norm: true,
            convs_per_unit: 2,
            relu_after_conv1: true,
            fusion: FusionKind::Parametric,
            ext_dim: 5,
            ext_hidden: 4,
            bn_epsilon: 1e-5,
            bn_momentum: 0.99,
        };
        let params = init_params(&config, 77).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                model: config,
                stats: NormStats::new(0.0, 123.0).unwrap(),
                ext_schema: Some(ExternalSchema {
                    n_weather: 2,
                    temp_min: -5.0,
                    temp_max: 30.0,
                    wind_min: 0.0,
                    wind_max: 12.0,
                }),
            },
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.strn");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.id(), ckpt.id());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[1] = b'?';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn version_mismatch_reports_both_versions() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(FormatError::VersionMismatch { file, supported }) => {
                assert_eq!(file, 9);
                assert_eq!(supported, STRN_VERSION);
            }
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
            Err(FormatError::Truncated { .. })
        ));
    }
}
