//! Binary checkpoints and transfer initialization.
//!
//! Layout: magic `KGFCKPT1`, `u32` version, `u64` header length, JSON header
//! `{config, vocab_hash}`, then one record per tensor in canonical order:
//! `[u32 name len][name][u32 rank][u64 dims..][u8 tag][f32 data..]`, all
//! little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use kgformer_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{init_tensor, param_specs, Model, ModelConfig, ModelError, Param, Tag, RELATION_TABLE};

pub const MAGIC: &[u8; 8] = b"KGFCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint truncated: record {record} is missing or incomplete")]
    Truncated { record: String },
    #[error("checkpoint incompatible with target config: {}", fields.join(", "))]
    Incompatible { fields: Vec<String> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
}

/// A trained model plus the hash of the vocabulary it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab_hash: String,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, vocab_hash: impl Into<String>) -> Self {
        Self { model, vocab_hash: vocab_hash.into() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let header = Header { config: self.model.config().clone(), vocab_hash: self.vocab_hash.clone() };
        let json = serde_json::to_vec(&header).map_err(io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in self.model.params() {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&[p.tag.byte()])?;
            for x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PersistError> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, PersistError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| PersistError::Format("file shorter than the magic".into()))?;
        if &magic != MAGIC {
            return Err(PersistError::Format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let version = read_u32(r).map_err(|_| PersistError::Format("missing version".into()))?;
        if version != VERSION {
            return Err(PersistError::Format(format!("unsupported version {version}")));
        }
        let len = read_u64(r).map_err(|_| PersistError::Format("missing header length".into()))?;
        let mut json = vec![0u8; usize::try_from(len).map_err(|_| PersistError::Format("header too large".into()))?];
        r.read_exact(&mut json).map_err(|_| PersistError::Format("header truncated".into()))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| PersistError::Format(format!("header: {e}")))?;
        header.config.validate()?;

        let mut params = Vec::new();
        for (name, shape) in param_specs(&header.config) {
            let truncated = || PersistError::Truncated { record: name.clone() };
            let name_len = read_u32(r).map_err(|_| truncated())? as usize;
            let mut raw = vec![0u8; name_len];
            r.read_exact(&mut raw).map_err(|_| truncated())?;
            let found = String::from_utf8(raw).map_err(|_| PersistError::Format(format!("record name for {name} is not UTF-8")))?;
            if found != name {
                return Err(PersistError::Format(format!("expected record {name}, found {found}")));
            }
            let rank = read_u32(r).map_err(|_| truncated())? as usize;
            let dims = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<io::Result<Vec<_>>>().map_err(|_| truncated())?;
            if dims != shape {
                return Err(PersistError::Format(format!("record {name} has shape {dims:?}, header config implies {shape:?}")));
            }
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(|_| truncated())?;
            let tag = Tag::from_byte(tag[0]).ok_or_else(|| PersistError::Format(format!("record {name} has tag byte {}", tag[0])))?;
            let n: usize = shape.iter().product();
            let mut payload = vec![0u8; n * 4];
            r.read_exact(&mut payload).map_err(|_| truncated())?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let value = Tensor::new(shape, data).map_err(|e| PersistError::Format(e.to_string()))?;
            params.push(Param { name, value, tag });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| PersistError::Format(e.to_string()))? != 0 {
            return Err(PersistError::Format("trailing bytes after the last record".into()));
        }
        let model = Model::from_params(header.config, params)?;
        Ok(Self { model, vocab_hash: header.vocab_hash })
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), PersistError> {
    let io_err = |source| PersistError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    ckpt.write_to(&mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PersistError> {
    let file = File::open(path).map_err(|source| PersistError::Io { path: path.to_path_buf(), source })?;
    Checkpoint::read_from(&mut BufReader::new(file))
}

/// Fields of `target` (and the vocabulary hash) that disagree with the
/// checkpoint in a way that changes tensor shapes or token meaning.
pub fn incompatibilities(ckpt: &Checkpoint, target: &ModelConfig, vocab_hash: &str) -> Vec<String> {
    let src = ckpt.model.config();
    let mut out = Vec::new();
    let mut check = |field: &str, a: usize, b: usize| {
        if a != b {
            out.push(format!("{field} (checkpoint {a}, target {b})"));
        }
    };
    check("d_model", src.d_model, target.d_model);
    check("heads", src.heads, target.heads);
    check("entity_layers", src.entity_layers, target.entity_layers);
    check("context_layers", src.context_layers, target.context_layers);
    check("ffn_dim", src.ffn_dim, target.ffn_dim);
    check("vocab_size", src.vocab_size, target.vocab_size);
    check("max_positions", src.max_positions, target.max_positions);
    if ckpt.vocab_hash != vocab_hash {
        out.push(format!("vocab_hash (checkpoint {}, target {vocab_hash})", ckpt.vocab_hash));
    }
    out
}

/// Copies every tensor except the relation table and tags it loaded; the
/// relation table is re-allocated at `[2R', d]` for the target's relation
/// count and initialized fresh from `target.seed`.
pub fn transfer_init(ckpt: &Checkpoint, target: &ModelConfig, vocab_hash: &str) -> Result<Model<f32>, PersistError> {
    let fields = incompatibilities(ckpt, target, vocab_hash);
    if !fields.is_empty() {
        return Err(PersistError::Incompatible { fields });
    }
    target.validate()?;
    let params = param_specs(target)
        .into_iter()
        .map(|(name, shape)| {
            if name == RELATION_TABLE {
                let value = init_tensor(&name, &shape, target.init_std, target.seed);
                return Ok(Param { name, value, tag: Tag::Fresh });
            }
            let src = ckpt.model.param(&name).ok_or_else(|| PersistError::Format(format!("checkpoint has no tensor {name}")))?;
            Ok(Param { name, value: src.value.clone(), tag: Tag::Loaded })
        })
        .collect::<Result<Vec<_>, PersistError>>()?;
    Ok(Model::from_params(target.clone(), params)?)
}
