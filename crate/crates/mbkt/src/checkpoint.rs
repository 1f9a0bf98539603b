//! Binary checkpoint format.
//!
//! ```text
//! "MBKT"  u16 version  u32 count
//! count × ( u32 name_len  name  u8 dtype  u8 rank  rank × u32 dim  values )
//! ```
//!
//! Integers and values are little-endian; dtype 1 is f64. The model
//! architecture is stored first as scalar or vector entries named
//! `config.*`, followed by every parameter in creation order.

use std::fs;
use std::path::{Path, PathBuf};

use mbkt_core::fusion::FusionConfig;
use mbkt_core::{HeadMode, Model, ModelConfig, StreamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"MBKT";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u16 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("unsupported dtype tag {0}")]
    Dtype(u8),
    #[error("entry name mismatch: expected {expected:?}, found {found:?}")]
    NameMismatch { expected: String, found: String },
    #[error("entry {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid stored configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

pub fn write_entries(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F64);
        out.push(e.tensor.rank() as u8);
        for d in e.tensor.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_entries(bytes: &[u8]) -> Result<Vec<Entry>, CheckpointError> {
    let mut r = Reader { buf: bytes };
    if bytes.len() < 4 || r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Config("entry name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(CheckpointError::Dtype(dtype));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| CheckpointError::Config(e.to_string()))?;
        entries.push(Entry { name, tensor });
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Config("trailing bytes after the last entry".into()));
    }
    Ok(entries)
}

fn scalar(name: &str, v: f64) -> Entry {
    Entry {
        name: name.to_string(),
        tensor: Tensor::scalar(v),
    }
}

fn config_entries(cfg: &ModelConfig) -> Vec<Entry> {
    vec![
        Entry {
            name: "config.dims".into(),
            tensor: Tensor::new(&[3], cfg.dims.iter().map(|&d| d as f64).collect()).expect("3 dims"),
        },
        scalar("config.d_model", cfg.d_model as f64),
        scalar("config.heads", cfg.heads as f64),
        scalar("config.ffn_ratio", cfg.ffn_ratio as f64),
        scalar("config.depth", cfg.depth as f64),
        scalar("config.streams", f64::from(cfg.fusion.streams.bits())),
        scalar("config.targets", f64::from(cfg.fusion.targets.bits())),
        scalar(
            "config.head",
            match cfg.fusion.head {
                HeadMode::SevenClass => 0.0,
                HeadMode::MultiLabel4 => 1.0,
            },
        ),
        scalar("config.transfer", f64::from(u8::from(cfg.transfer))),
        scalar("config.acoustic_encoder", f64::from(u8::from(cfg.acoustic_encoder))),
    ]
}

fn parse_config(entries: &[Entry]) -> Result<ModelConfig, CheckpointError> {
    let expected = config_entries(&ModelConfig::for_mode(
        mbkt_core::ModalityMode::MissingAudio,
        [1, 1, 1],
        HeadMode::SevenClass,
    ));
    if entries.len() < expected.len() {
        return Err(CheckpointError::Truncated);
    }
    for (want, got) in expected.iter().zip(entries) {
        if want.name != got.name {
            return Err(CheckpointError::NameMismatch {
                expected: want.name.clone(),
                found: got.name.clone(),
            });
        }
        if want.tensor.shape() != got.tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: got.name.clone(),
                expected: want.tensor.shape().to_vec(),
                found: got.tensor.shape().to_vec(),
            });
        }
    }
    let int = |i: usize| -> Result<usize, CheckpointError> {
        let v = entries[i].tensor.data()[0];
        if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
            Ok(v as usize)
        } else {
            Err(CheckpointError::Config(format!(
                "{} is not a count: {v}",
                entries[i].name
            )))
        }
    };
    let dims_t = &entries[0].tensor;
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = dims_t.data()[i];
        if !(v >= 1.0 && v.fract() == 0.0) {
            return Err(CheckpointError::Config(format!("bad feature width {v}")));
        }
        *d = v as usize;
    }
    let set = |i: usize| {
        int(i).and_then(|b| {
            u8::try_from(b)
                .ok()
                .and_then(StreamSet::from_bits)
                .ok_or_else(|| CheckpointError::Config(format!("bad stream set {b}")))
        })
    };
    let flag = |i: usize| match int(i)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(CheckpointError::Config(format!(
            "{} must be 0 or 1, got {v}",
            entries[i].name
        ))),
    };
    let head = match int(7)? {
        0 => HeadMode::SevenClass,
        1 => HeadMode::MultiLabel4,
        v => return Err(CheckpointError::Config(format!("unknown head tag {v}"))),
    };
    let cfg = ModelConfig {
        dims,
        d_model: int(1)?,
        heads: int(2)?,
        ffn_ratio: int(3)?,
        depth: int(4)?,
        fusion: FusionConfig {
            streams: set(5)?,
            targets: set(6)?,
            head,
        },
        transfer: flag(8)?,
        acoustic_encoder: flag(9)?,
    };
    cfg.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut entries = config_entries(&model.cfg);
    entries.extend(model.params.iter().map(|(name, t)| Entry {
        name: name.to_string(),
        tensor: t.clone(),
    }));
    write_entries(&entries)
}

/// Rebuilds a model from checkpoint bytes; nothing is returned unless every
/// entry matches the stored architecture.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let entries = read_entries(bytes)?;
    let cfg = parse_config(&entries)?;
    let n_cfg = config_entries(&cfg).len();
    let mut model = Model::new(cfg, 0).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let stored = &entries[n_cfg..];
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let Some(e) = stored.get(i) else {
            return Err(CheckpointError::NameMismatch {
                expected: name.clone(),
                found: "<end of file>".into(),
            });
        };
        if &e.name != name {
            return Err(CheckpointError::NameMismatch {
                expected: name.clone(),
                found: e.name.clone(),
            });
        }
        let id = model.params.find(name).expect("name comes from the store");
        let slot = model.params.get_mut(id);
        if slot.shape() != e.tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: slot.shape().to_vec(),
                found: e.tensor.shape().to_vec(),
            });
        }
        *slot = e.tensor.clone();
    }
    if let Some(extra) = stored.get(names.len()) {
        return Err(CheckpointError::NameMismatch {
            expected: "<end of file>".into(),
            found: extra.name.clone(),
        });
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
