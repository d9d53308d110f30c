//! Binary model container.
//!
//! All integers and floats are little-endian.
//!
//! | field        | size            | notes                                   |
//! |--------------|-----------------|-----------------------------------------|
//! | magic        | 6               | `PMFFNN`                                |
//! | version      | u16             | currently `1`                           |
//! | config_len   | u32             | byte length of the next field           |
//! | config       | config_len      | architecture config, UTF-8 JSON         |
//! | tensor_count | u32             |                                         |
//! | tensors      | repeated        | see below                               |
//!
//! Each tensor is `name_len: u16`, `name` (UTF-8), `rows: u32`, `cols: u32`,
//! then `rows·cols` `f64` values in row-major order. Model tensors are named
//! `branch{i}.{layer}.{param}` / `head.{layer}.{param}`; standardization
//! statistics, when present, are `input.mean` and `input.stddev`.

use std::fs;
use std::path::Path;

use crate::data::StandardizeStats;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelGraph};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 6] = b"PMFFNN";
pub const VERSION: u16 = 1;

/// A trained model together with the input standardization it expects.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub model: ModelGraph,
    pub standardize: Option<StandardizeStats>,
}

pub fn to_bytes(model: &ModelGraph, standardize: Option<&StandardizeStats>) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    let mut tensors: Vec<(String, Matrix)> = model.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    if let Some(s) = standardize {
        tensors.push(("input.mean".into(), Matrix::row_vector(&s.mean)));
        tensors.push(("input.stddev".into(), Matrix::row_vector(&s.stddev)));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<SavedModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::ModelFormat("not a model file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|e| Error::ModelFormat(format!("config is not UTF-8: {e}")))?;
    let config = ArchConfig::from_json_str(config_text)?;
    let mut model = ModelGraph::build(&config, 0)?;
    let expected = model.named_tensors().len();

    let count = r.u32()? as usize;
    let mut loaded = 0;
    let mut mean = None;
    let mut stddev = None;
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::ModelFormat(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::ModelFormat(format!("tensor `{name}` is too large")))?;
        let values: Vec<f64> = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Matrix::from_vec(rows, cols, values)?;
        match name.as_str() {
            "input.mean" => mean = Some(t.into_vec()),
            "input.stddev" => stddev = Some(t.into_vec()),
            _ => {
                model.set_tensor(&name, t)?;
                loaded += 1;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if loaded != expected {
        return Err(Error::ModelFormat(format!(
            "expected {expected} tensors, found {loaded}"
        )));
    }
    let standardize = match (mean, stddev) {
        (Some(mean), Some(stddev)) if mean.len() == config.n_features && stddev.len() == config.n_features => {
            Some(StandardizeStats { mean, stddev })
        }
        (None, None) => None,
        _ => return Err(Error::ModelFormat("incomplete input standardization".into())),
    };
    Ok(SavedModel { model, standardize })
}

/// Writes to a sibling temp file and renames it into place.
pub fn save(path: impl AsRef<Path>, model: &ModelGraph, standardize: Option<&StandardizeStats>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(model, standardize))
}

pub fn load(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}
