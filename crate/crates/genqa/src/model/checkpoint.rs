//! Single-file checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON
//! header (format version, dtype, model config, step, metrics, vocabulary,
//! shaping config and the tensor index with explicit shapes), then the raw
//! tensor payloads concatenated little-endian in index order. Writes go to
//! a sibling temp file followed by a rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Parameters};
use crate::scalar::{Dtype, Scalar};
use crate::shaping::{ShapingConfig, Vocabulary};

const MAGIC: &[u8; 8] = b"GQACKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabSection {
    bucket_count: usize,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: Dtype,
    config: ModelConfig,
    step: u64,
    metrics: BTreeMap<String, f64>,
    vocab: VocabSection,
    shaping: Option<ShapingConfig>,
    tensors: Vec<TensorMeta>,
}

/// A model snapshot: parameters plus everything needed to run them
/// (vocabulary and the shaping that produced their training data).
#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub params: Parameters<S>,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
    pub vocab: Vocabulary,
    pub shaping: Option<ShapingConfig>,
}

/// A checkpoint of either precision, as found on disk.
pub enum LoadedCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl LoadedCheckpoint {
    pub fn dtype(&self) -> Dtype {
        match self {
            LoadedCheckpoint::F32(_) => Dtype::F32,
            LoadedCheckpoint::F64(_) => Dtype::F64,
        }
    }

    pub fn step(&self) -> u64 {
        match self {
            LoadedCheckpoint::F32(c) => c.step,
            LoadedCheckpoint::F64(c) => c.step,
        }
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let views = self.params.named_views();
        let tensors: Vec<TensorMeta> = views
            .iter()
            .map(|(name, view)| TensorMeta {
                name: name.clone(),
                shape: view.shape().to_vec(),
                len: view.len(),
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: S::DTYPE,
            config: self.params.cfg.clone(),
            step: self.step,
            metrics: self.metrics.clone(),
            vocab: VocabSection {
                bucket_count: self.vocab.bucket_count(),
                tokens: self.vocab.tokens().to_vec(),
            },
            shaping: self.shaping.clone(),
            tensors,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| ModelError::BadCheckpoint(format!("header serialization: {e}")))?;

        let mut payload: Vec<u8> = Vec::new();
        for (_, view) in &views {
            for &x in view.iter() {
                x.write_le(&mut payload);
            }
        }

        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut out = fs::File::create(&tmp)?;
            out.write_all(MAGIC)?;
            out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
            out.write_all(&header_bytes)?;
            out.write_all(&payload)?;
            out.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a checkpoint that must have this scalar's precision.
    pub fn load(path: &Path) -> Result<Checkpoint<S>, ModelError> {
        match load(path)? {
            LoadedCheckpoint::F32(c) if S::DTYPE == Dtype::F32 => {
                // S == f32 here; route through the byte representation to
                // satisfy the type system without unsafe.
                Ok(reinterpret(c))
            }
            LoadedCheckpoint::F64(c) if S::DTYPE == Dtype::F64 => Ok(reinterpret(c)),
            other => Err(ModelError::BadCheckpoint(format!(
                "checkpoint holds {} tensors but {} was requested",
                other.dtype(),
                S::DTYPE
            ))),
        }
    }
}

/// Converts between `Checkpoint<A>` and `Checkpoint<B>` when the caller has
/// already proven `A == B` via the dtype tags.
fn reinterpret<A: Scalar, B: Scalar>(c: Checkpoint<A>) -> Checkpoint<B> {
    assert_eq!(A::DTYPE, B::DTYPE);
    let mut params = Parameters::<B>::zeros(&c.params.cfg).expect("config was valid");
    {
        let src = c.params.named_views();
        let mut dst = params.named_views_mut();
        for ((_, s), (_, d)) in src.iter().zip(dst.iter_mut()) {
            for (from, to) in s.iter().zip(d.iter_mut()) {
                *to = B::of_f64(from.as_f64());
            }
        }
    }
    Checkpoint {
        params,
        step: c.step,
        metrics: c.metrics,
        vocab: c.vocab,
        shaping: c.shaping,
    }
}

/// Loads whatever precision the file holds.
pub fn load(path: &Path) -> Result<LoadedCheckpoint, ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::BadCheckpoint("missing magic".into()));
    }
    let header_len =
        u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(ModelError::BadCheckpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| ModelError::BadCheckpoint(format!("header parse: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[header_end..];
    match header.dtype {
        Dtype::F32 => Ok(LoadedCheckpoint::F32(load_payload::<f32>(header, payload)?)),
        Dtype::F64 => Ok(LoadedCheckpoint::F64(load_payload::<f64>(header, payload)?)),
    }
}

fn load_payload<S: Scalar>(header: Header, payload: &[u8]) -> Result<Checkpoint<S>, ModelError> {
    let mut params = Parameters::<S>::zeros(&header.config)?;
    let expected: usize = header.tensors.iter().map(|t| t.len * S::BYTE_WIDTH).sum();
    if payload.len() != expected {
        return Err(ModelError::BadCheckpoint(format!(
            "payload of {} bytes, expected {expected}",
            payload.len()
        )));
    }
    {
        let mut views = params.named_views_mut();
        let mut offset = 0usize;
        for meta in &header.tensors {
            let (_, view) = views
                .iter_mut()
                .find(|(name, _)| *name == meta.name)
                .ok_or_else(|| {
                    ModelError::BadCheckpoint(format!("unknown tensor {:?}", meta.name))
                })?;
            if view.shape() != meta.shape.as_slice() {
                return Err(ModelError::BadCheckpoint(format!(
                    "tensor {:?} has shape {:?} on disk but {:?} in config",
                    meta.name,
                    meta.shape,
                    view.shape()
                )));
            }
            for slot in view.iter_mut() {
                *slot = S::read_le(&payload[offset..offset + S::BYTE_WIDTH]);
                offset += S::BYTE_WIDTH;
            }
        }
    }
    let vocab = Vocabulary::from_tokens(header.vocab.tokens, header.vocab.bucket_count)
        .map_err(|e| ModelError::BadCheckpoint(format!("vocabulary: {e}")))?;
    if vocab.len() != header.config.vocab_size {
        return Err(ModelError::BadCheckpoint(format!(
            "vocabulary of {} tokens does not match vocab_size {}",
            vocab.len(),
            header.config.vocab_size
        )));
    }
    Ok(Checkpoint {
        params,
        step: header.step,
        metrics: header.metrics,
        vocab,
        shaping: header.shaping,
    })
}

#[cfg(test)]
mod tests {
    use super::super::init;
    use super::*;

    fn vocab20() -> Vocabulary {
        Vocabulary::build(
            ["alpha beta gamma delta epsilon zeta eta theta iota kappa"].into_iter(),
            5,
        )
    }

    #[test]
    fn round_trip_preserves_bits() {
        let vocab = vocab20();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 6,
            hidden_dim: 8,
            n_layers: 2,
            max_positions: 32,
            seed: 5,
            float_width: 64,
            ..ModelConfig::default()
        };
        let params = init::<f64>(&cfg).unwrap();
        let ckpt = Checkpoint {
            params,
            step: 123,
            metrics: BTreeMap::from([("dev_loss".to_string(), 1.25)]),
            vocab,
            shaping: Some(ShapingConfig::default()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();

        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(back.step, 123);
        assert_eq!(back.metrics["dev_loss"], 1.25);
        assert_eq!(back.vocab, ckpt.vocab);
        assert_eq!(back.shaping, ckpt.shaping);
        for ((_, a), (_, b)) in ckpt
            .params
            .named_views()
            .iter()
            .zip(back.params.named_views())
        {
            let bits_a: Vec<u64> = a.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }

        // wrong-precision load is refused
        assert!(matches!(
            Checkpoint::<f32>::load(&path),
            Err(ModelError::BadCheckpoint(_))
        ));
        // dtype-dispatching load works
        assert!(matches!(load(&path), Ok(LoadedCheckpoint::F64(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            load(&path),
            Err(ModelError::BadCheckpoint(_))
        ));
    }
}
