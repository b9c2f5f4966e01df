//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "SHLD" | version u32 | config_len u64 | config JSON
//! | epoch u64 | adam_t u64
//! | rng seed [32] | rng stream u64 | rng word_pos u128
//! | tensor_count u64 | per tensor: rows u64, cols u64, rows·cols f64
//! | SHA-256 of everything above
//! ```
//!
//! The tensor table holds the parameters, then Adam's first moments, then
//! its second moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::TrainConfig;
use crate::rng::RngSnapshot;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SHLD";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub adam_t: u64,
    pub rng: RngSnapshot,
    pub params: Vec<Tensor>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let tensors: Vec<&Tensor> = self.params.iter().chain(&self.adam_m).chain(&self.adam_v).collect();
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = u32::from_le_bytes(r.take()?);
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        if bytes.len() < r.pos + DIGEST_LEN {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            // A short file fails the checksum too; report it as truncation
            // when the declared layout cannot be read or runs past the end.
            return Err(if declared_len(bytes).is_none_or(|n| n > bytes.len()) {
                CheckpointError::Truncated
            } else {
                CheckpointError::Checksum
            });
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let config_len = r.len()?;
        let config: TrainConfig = serde_json::from_slice(r.slice(config_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        let epoch = u64::from_le_bytes(r.take()?);
        let adam_t = u64::from_le_bytes(r.take()?);
        let seed: [u8; 32] = r.take()?;
        let stream = u64::from_le_bytes(r.take()?);
        let word_pos = u128::from_le_bytes(r.take()?);
        let count = r.len()?;
        if count % 3 != 0 {
            return Err(CheckpointError::Corrupt(format!("{count} tensors is not three equal tables")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = r.len()?;
            let cols = r.len()?;
            let len = rows
                .checked_mul(cols)
                .filter(|l| l.checked_mul(8).is_some_and(|b| b <= body.len()))
                .ok_or(CheckpointError::Truncated)?;
            let raw = r.slice(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::matrix(rows, cols, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        let third = count / 3;
        let adam_v = tensors.split_off(2 * third);
        let adam_m = tensors.split_off(third);
        Ok(Checkpoint {
            config,
            epoch,
            adam_t,
            rng: RngSnapshot { seed, stream, word_pos },
            params: tensors,
            adam_m,
            adam_v,
        })
    }
}

/// Total length implied by the header fields; `None` when the fields
/// themselves run past the end of `bytes`.
fn declared_len(bytes: &[u8]) -> Option<usize> {
    let mut r = Reader { bytes, pos: 8 };
    let config_len = r.len().ok()?;
    r.pos = r.pos.checked_add(config_len)?;
    r.pos += 8 + 8 + 32 + 8 + 16;
    let count = r.len().ok()?;
    for _ in 0..count {
        let rows = r.len().ok()?;
        let cols = r.len().ok()?;
        r.pos = r.pos.checked_add(rows.checked_mul(cols)?.checked_mul(8)?)?;
    }
    r.pos.checked_add(DIGEST_LEN)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn slice(&mut self, len: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(len).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.slice(N)?.try_into().expect("length checked"))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(u64::from_le_bytes(self.take()?)).map_err(|_| CheckpointError::Truncated)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes to a sibling temporary file and renames it into place, so a
/// crash never leaves a half-written checkpoint at `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    file.write_all(&ckpt.to_bytes()).map_err(|e| io_err(&tmp, e))?;
    file.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
