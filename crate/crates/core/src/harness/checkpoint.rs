//! Single-file checkpoints.
//!
//! Layout: a text preamble
//!
//! ```text
//! BETCKPT
//! format_version=1
//! header_bytes=<N>
//! <N bytes of JSON header>
//! ```
//!
//! followed by one binary block per tensor: `u32` name length, UTF-8 name,
//! `u32` rank, `rank × u64` dims, `u64` value count, then the values as
//! little-endian `f64`. Blocks appear in header order: `param.*`, then
//! `adam.m.*`, then `adam.v.*`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ModelConfig, TrainConfig};
use super::model::Model;
use super::optim::Adam;
use super::vocab::Vocab;
use crate::tensor::Tensor;

pub const MAGIC: &str = "BETCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: bad magic line")]
    BadMagic,
    #[error("unsupported format_version {found} (expected {FORMAT_VERSION})")]
    Version { found: String },
    #[error("malformed header field `{field}`: {message}")]
    Header { field: String, message: String },
    #[error("file truncated while reading {field}")]
    Truncated { field: String },
    #[error("tensor `{field}`: {message}")]
    Tensor { field: String, message: String },
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adam,
    pub vocab: Vocab,
    pub train_config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    vocab: Vocab,
    tensors: Vec<String>,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    fn blocks(&self) -> Vec<(String, &Tensor)> {
        let named = self.model.named_tensors();
        let mut out: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (format!("param.{n}"), *t)).collect();
        out.extend(named.iter().zip(&self.optimizer.m).map(|((n, _), t)| (format!("adam.m.{n}"), t)));
        out.extend(named.iter().zip(&self.optimizer.v).map(|((n, _), t)| (format!("adam.v.{n}"), t)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blocks = self.blocks();
        let header = Header {
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            step: self.optimizer.step,
            learning_rate: self.optimizer.learning_rate,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
            vocab: self.vocab.clone(),
            tensors: blocks.iter().map(|(n, _)| n.clone()).collect(),
        };
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        let mut out = format!("{MAGIC}\nformat_version={FORMAT_VERSION}\nheader_bytes={}\n", json.len()).into_bytes();
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for (name, t) in blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.line("magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.key_value("format_version")?;
        if version != FORMAT_VERSION.to_string() {
            return Err(CheckpointError::Version { found: version });
        }
        let len: usize = r.key_value("header_bytes")?.parse().map_err(|e| CheckpointError::Header {
            field: "header_bytes".into(),
            message: format!("{e}"),
        })?;
        let json = r.take(len, "header")?;
        if r.take(1, "header terminator")? != b"\n" {
            return Err(header_err("header_bytes", "header length does not match"));
        }
        let header: Header = serde_json::from_slice(json).map_err(|e| header_err("header", e))?;

        let config = header.model_config;
        config.validate().map_err(|e| header_err("model_config", e))?;
        if config.vocab_size != header.vocab.len() {
            return Err(header_err(
                "vocab",
                format!("{} tokens but vocab_size is {}", header.vocab.len(), config.vocab_size),
            ));
        }
        let mut model =
            Model::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| header_err("model_config", e))?;
        let shapes: Vec<Vec<usize>> = model.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let expected: Vec<String> = ["param", "adam.m", "adam.v"]
            .iter()
            .flat_map(|p| names.iter().map(move |n| format!("{p}.{n}")))
            .collect();
        if header.tensors != expected {
            return Err(header_err("tensors", "tensor list does not match the model configuration"));
        }

        let mut names_iter = expected.iter();
        let params = read_group_named(&mut r, &shapes, &mut names_iter)?;
        let m = read_group_named(&mut r, &shapes, &mut names_iter)?;
        let v = read_group_named(&mut r, &shapes, &mut names_iter)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        for (dst, src) in model.tensors_mut().into_iter().zip(params) {
            *dst = src;
        }
        Ok(Self {
            model,
            optimizer: Adam {
                learning_rate: header.learning_rate,
                beta1: header.beta1,
                beta2: header.beta2,
                eps: header.eps,
                step: header.step,
                m,
                v,
            },
            vocab: header.vocab,
            train_config: header.train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn header_err(field: &str, message: impl ToString) -> CheckpointError {
    CheckpointError::Header {
        field: field.into(),
        message: message.to_string(),
    }
}

fn read_group_named<'a>(
    r: &mut Reader,
    shapes: &[Vec<usize>],
    names: &mut impl Iterator<Item = &'a String>,
) -> Result<Vec<Tensor>, CheckpointError> {
    shapes
        .iter()
        .map(|s| {
            let name = names.next().expect("one name per block");
            r.named_tensor(name, s)
        })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Truncated { field: field.into() }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn line(&mut self, field: &str) -> Result<String, CheckpointError> {
        let rest = &self.bytes[self.pos..];
        let nl = rest
            .iter()
            .take(256)
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Truncated { field: field.into() })?;
        let s = std::str::from_utf8(&rest[..nl]).map_err(|e| header_err(field, e))?.to_string();
        self.pos += nl + 1;
        Ok(s)
    }

    fn key_value(&mut self, key: &str) -> Result<String, CheckpointError> {
        let line = self.line(key)?;
        match line.split_once('=') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(header_err(key, format!("expected `{key}=...`, found {line:?}"))),
        }
    }

    fn u32(&mut self, field: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn named_tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor, CheckpointError> {
        let bad = |m: String| CheckpointError::Tensor {
            field: name.into(),
            message: m,
        };
        let len = self.u32(name)? as usize;
        let found = self.take(len, name)?;
        if found != name.as_bytes() {
            return Err(bad(format!("found block `{}`", String::from_utf8_lossy(found))));
        }
        let rank = self.u32(name)? as usize;
        if rank != shape.len() {
            return Err(bad(format!("rank {rank}, expected {}", shape.len())));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u64(name)? as usize);
        }
        if dims != shape {
            return Err(bad(format!("shape {dims:?}, expected {shape:?}")));
        }
        let count = self.u64(name)? as usize;
        if count != shape.iter().product::<usize>() {
            return Err(bad(format!("{count} values for shape {shape:?}")));
        }
        let raw = self.take(count.checked_mul(8).ok_or_else(|| bad("count overflows".into()))?, name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(dims, data).map_err(|e| bad(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Tokenization;

    fn sample() -> Checkpoint {
        let vocab = Vocab::build("abcab", Tokenization::Char, 1, None).unwrap();
        let config = ModelConfig {
            n_layers: 1,
            d_model: 4,
            d_ff: 6,
            max_seq_len: 5,
            vocab_size: vocab.len(),
            ..Default::default()
        };
        let model = Model::init(&config, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let params: Vec<&Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
        let mut optimizer = Adam::new(&params, 1e-3, 0.9, 0.98, 1e-8);
        optimizer.step = 7;
        optimizer.m[0].data_mut()[0] = 0.1 + 0.2;
        optimizer.v[1].data_mut()[2] = f64::MIN_POSITIVE;
        Checkpoint {
            model,
            optimizer,
            vocab,
            train_config: TrainConfig::default(),
        }
    }

    #[test]
    fn round_trip_is_lossless_and_byte_stable() {
        let cp = sample();
        let bytes = cp.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, cp);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_truncation_is_a_typed_error() {
        let bytes = sample().to_bytes();
        for cut in (0..bytes.len()).step_by(7) {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn header_problems_name_the_field() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes).to_string();
        let bumped = text.replacen("format_version=1", "format_version=2", 1);
        assert!(matches!(
            Checkpoint::from_bytes(bumped.as_bytes()),
            Err(CheckpointError::Version { .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(b"garbage\n"), Err(CheckpointError::BadMagic)));
        let mut corrupt = bytes.clone();
        let at = text.find("\"model_config\"").unwrap();
        corrupt[at + 1] = b'X';
        match Checkpoint::from_bytes(&corrupt) {
            Err(CheckpointError::Header { field, .. }) => assert_eq!(field, "header"),
            other => panic!("{other:?}"),
        }
    }
}
