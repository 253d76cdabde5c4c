//! CTKV v1 binary weight format (little-endian).
//!
//! ```text
//! "CTKV" u32:version=1
//! u32 x8: n_layers n_heads n_kv_heads d_model head_dim ffn_dim vocab_size max_seq
//! u8:cache_dtype u8:pos_scheme f32:norm_eps
//! repeated: u32:name_len name u8:ndim u32[ndim]:dims f32[..]:data
//! ```

use std::collections::BTreeMap;
use std::io::Read;

use super::{tensor_shapes, Model};
use crate::config::{CacheDtype, ModelConfig, PosScheme};
use crate::error::{LoadError, Result};

const MAGIC: &[u8; 4] = b"CTKV";
const VERSION: u32 = 1;

pub fn save_model(model: &Model) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.n_layers,
        cfg.n_heads,
        cfg.n_kv_heads,
        cfg.d_model,
        cfg.head_dim,
        cfg.ffn_dim,
        cfg.vocab_size,
        cfg.max_seq,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(cfg.cache_dtype.to_byte());
    out.push(cfg.pos_scheme.to_byte());
    out.extend_from_slice(&cfg.norm_eps.to_le_bytes());
    for (name, shape) in tensor_shapes(cfg) {
        let data = model.tensor(&name).expect("canonical name");
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for d in &shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &'static str) -> std::result::Result<[u8; N], LoadError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| LoadError::Truncated(what))?;
        Ok(buf)
    }

    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, LoadError> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn f32(&mut self, what: &'static str) -> std::result::Result<f32, LoadError> {
        Ok(f32::from_le_bytes(self.bytes(what)?))
    }

    /// Reads one byte, returning `None` at a clean end of stream.
    fn peek_eof(&mut self) -> std::result::Result<Option<u8>, LoadError> {
        let mut buf = [0u8; 1];
        loop {
            match self.inner.read(&mut buf) {
                Ok(0) => return Ok(None),
                Ok(_) => return Ok(Some(buf[0])),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(_) => return Err(LoadError::Truncated("tensor record")),
            }
        }
    }
}

/// Decodes a CTKV stream. Every canonical tensor must appear exactly once
/// with the shape the header implies.
pub fn load_model<R: Read>(source: R) -> Result<Model> {
    let mut r = Reader { inner: source };
    let magic = r.bytes::<4>("magic")?;
    if &magic != MAGIC {
        return Err(LoadError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(LoadError::VersionMismatch(version).into());
    }
    let mut dims = [0usize; 8];
    for d in dims.iter_mut() {
        *d = r.u32("header")? as usize;
    }
    let dtype_byte = r.u8("cache_dtype")?;
    let pos_byte = r.u8("pos_scheme")?;
    let norm_eps = r.f32("norm_eps")?;
    let config = ModelConfig {
        n_layers: dims[0],
        n_heads: dims[1],
        n_kv_heads: dims[2],
        d_model: dims[3],
        head_dim: dims[4],
        ffn_dim: dims[5],
        vocab_size: dims[6],
        max_seq: dims[7],
        cache_dtype: CacheDtype::from_byte(dtype_byte)
            .ok_or_else(|| LoadError::BadHeader(format!("cache_dtype {dtype_byte}")))?,
        pos_scheme: PosScheme::from_byte(pos_byte)
            .ok_or_else(|| LoadError::BadHeader(format!("pos_scheme {pos_byte}")))?,
        norm_eps,
    };
    config
        .validate()
        .map_err(|e| LoadError::BadHeader(e.to_string()))?;

    let expected: BTreeMap<String, Vec<usize>> = tensor_shapes(&config).into_iter().collect();
    let mut model = Model::zeros(config)?;
    let mut seen = BTreeMap::new();

    while let Some(first) = r.peek_eof()? {
        let rest = r.bytes::<3>("tensor name length")?;
        let name_len = u32::from_le_bytes([first, rest[0], rest[1], rest[2]]) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.inner
            .read_exact(&mut name_bytes)
            .map_err(|_| LoadError::Truncated("tensor name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| LoadError::BadHeader("tensor name is not UTF-8".into()))?;
        let Some(shape) = expected.get(&name) else {
            return Err(LoadError::UnknownTensor(name).into());
        };
        let ndim = r.u8("tensor ndim")? as usize;
        let mut found = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            found.push(r.u32("tensor dims")? as usize);
        }
        if &found != shape {
            return Err(LoadError::ShapeMismatch {
                name,
                expected: shape.clone(),
                found,
            }
            .into());
        }
        if seen.insert(name.clone(), ()).is_some() {
            return Err(LoadError::DuplicateTensor(name).into());
        }
        let count: usize = shape.iter().product();
        let mut raw = vec![0u8; count * 4];
        r.inner
            .read_exact(&mut raw)
            .map_err(|_| LoadError::Truncated("tensor data"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LoadError::NonFinite(name).into());
        }
        *model.tensor_mut(&name).expect("canonical name") = data;
    }
    if let Some(missing) = expected.keys().find(|k| !seen.contains_key(*k)) {
        return Err(LoadError::MissingTensor(missing.clone()).into());
    }
    Ok(model)
}
