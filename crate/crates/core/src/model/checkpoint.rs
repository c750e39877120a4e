//! Model checkpoints. The MLP and config live in the checkpoint file; the
//! embeddings live in a separate `SHRK` store file that the checkpoint names.
//!
//! ```text
//! magic       4  b"RTCK"
//! version     2  u16
//! config_len  4  u32, then that many bytes of JSON ModelConfig
//! n_fields    4  u32
//! per field:  cardinality u32, active u8
//! n_layers    4  u32
//! per layer:  rows u32, cols u32, rows*cols f64 weights (row-major), rows f64 bias
//! store_len   2  u16, then the store file name (UTF-8, relative to the checkpoint)
//! ```

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use super::{Dense, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::store::EmbeddingStore;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RTCK";
const VERSION: u16 = 1;

/// Path of the store file written next to a checkpoint.
pub fn store_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("shrk")
}

impl Model {
    /// Writes the checkpoint to `path` and the embedding store next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let store_path = store_path_for(path);
        let store_name = store_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Config(format!("unusable checkpoint path {}", path.display())))?
            .to_owned();

        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.n_fields() as u32).to_le_bytes());
        for (c, a) in self.cardinalities.iter().zip(&self.active) {
            out.extend_from_slice(&c.to_le_bytes());
            out.push(u8::from(*a));
        }
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.n_out() as u32).to_le_bytes());
            out.extend_from_slice(&(l.n_in() as u32).to_le_bytes());
            l.weights.iter().for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
            l.bias.iter().for_each(|b| out.extend_from_slice(&b.to_le_bytes()));
        }
        out.extend_from_slice(&(store_name.len() as u16).to_le_bytes());
        out.extend_from_slice(store_name.as_bytes());

        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
        self.store.save(&store_path)?;
        Ok(store_path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Cursor { buf: &bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic, expected \"RTCK\""));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_at = r.pos as u64;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::format(cfg_at, format!("bad config: {e}")))?;
        let n_fields = r.u32()? as usize;
        let mut cardinalities = Vec::with_capacity(n_fields.min(bytes.len()));
        let mut active = Vec::with_capacity(n_fields.min(bytes.len()));
        for _ in 0..n_fields {
            cardinalities.push(r.u32()?);
            active.push(r.u8()? != 0);
        }
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(bytes.len()));
        for _ in 0..n_layers {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let w: Vec<f64> = (0..rows * cols).map(|_| r.f64()).collect::<Result<_>>()?;
            let b: Vec<f64> = (0..rows).map(|_| r.f64()).collect::<Result<_>>()?;
            layers.push(Dense {
                weights: Array2::from_shape_vec((rows, cols), w).expect("sized above"),
                bias: Array1::from(b),
            });
        }
        let name_len = usize::from(r.u16()?);
        let name_at = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(name_at, "store name is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes in checkpoint"));
        }
        let store_path = path.parent().unwrap_or(Path::new("")).join(name);
        let store = EmbeddingStore::load(&store_path)?;
        Model::from_parts(config, cardinalities, active, store, layers)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
