//! Versioned binary container for named f32 tensors plus a JSON metadata
//! block, and the training checkpoint built on top of it.
//!
//! Layout (little endian): magic `SIANCKPT`, u16 version, u32 metadata
//! length, metadata JSON bytes, u32 tensor count, then per tensor: u32 name
//! length, name bytes, u32 rank, u64 dims, f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SIANCKPT";
pub const VERSION: u16 = 1;

pub type NamedTensors = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: NamedTensors,
}

impl TensorArchive {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, (dims, data)) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for &d in dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        let magic = cur.take(8).ok_or_else(|| fmt("truncated header".into()))?;
        if magic != MAGIC {
            return Err(fmt("not a SIAN checkpoint (bad magic)".into()));
        }
        let version = cur.u16().ok_or_else(|| fmt("truncated header".into()))?;
        if version != VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let meta_len = cur.u32().ok_or_else(|| fmt("truncated header".into()))? as usize;
        let meta_bytes = cur.take(meta_len).ok_or_else(|| fmt("truncated metadata".into()))?;
        let meta: serde_json::Value =
            serde_json::from_slice(meta_bytes).map_err(|e| fmt(format!("metadata: {e}")))?;
        let count = cur.u32().ok_or_else(|| fmt("truncated tensor table".into()))?;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let trunc = || fmt(format!("truncated at tensor {i}"));
            let name_len = cur.u32().ok_or_else(trunc)? as usize;
            let name = std::str::from_utf8(cur.take(name_len).ok_or_else(trunc)?)
                .map_err(|_| fmt(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = cur.u32().ok_or_else(trunc)? as usize;
            if rank > 8 {
                return Err(fmt(format!("tensor {name} has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize).ok_or_else(trunc))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt(format!("tensor {name} is too large")))?;
            let bytes = cur.take(n.checked_mul(4).ok_or_else(trunc)?).ok_or_else(trunc)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, (dims, data));
        }
        if cur.pos != buf.len() {
            return Err(fmt("trailing bytes after tensor table".into()));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// failure never leaves a truncated archive at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = tmp_path(path);
        let result = (|| {
            let file = fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(file);
            self.write_to(&mut w)?;
            let file = w.into_inner().map_err(|e| e.into_error())?;
            file.sync_all()
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(path, e));
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut f, path)
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string; JSON numbers cannot hold a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<rand_chacha::ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}
