//! Model file format.
//!
//! ```text
//! magic    6 bytes   "DBONET"
//! version  u32 LE
//! meta_len u64 LE
//! meta     meta_len bytes of JSON: the DeepOnetSpec
//! count    u64 LE    number of parameters
//! params   count x f64 LE, flat order (branch, trunk, output layer,
//!          affine means, affine log-stds, residual log-variance)
//! ```

use std::fs;
use std::path::Path;

use super::{DeepOnet, DeepOnetSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"DBONET";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &DeepOnet) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&model.spec)?;
    let params = model.params();
    let mut out = Vec::with_capacity(26 + meta.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse(buf: &[u8]) -> std::result::Result<(DeepOnetSpec, Vec<f64>), String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err("not a model file (bad magic)".into());
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format!("unsupported version {version}, expected {VERSION}"));
    }
    let meta_len = usize::try_from(r.u64()?).map_err(|e| e.to_string())?;
    let spec: DeepOnetSpec =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("metadata: {e}"))?;
    let count = usize::try_from(r.u64()?).map_err(|e| e.to_string())?;
    let bytes = r.take(count.checked_mul(8).ok_or("parameter count overflow")?)?;
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((spec, params))
}

pub fn from_bytes(buf: &[u8]) -> std::result::Result<DeepOnet, String> {
    let (spec, params) = parse(buf)?;
    let mut model = DeepOnet::new(spec, 0).map_err(|e| e.to_string())?;
    if params.len() != model.param_count() {
        return Err(format!(
            "architecture has {} parameters, file has {}",
            model.param_count(),
            params.len()
        ));
    }
    model.set_params(&params).map_err(|e| e.to_string())?;
    Ok(model)
}

pub fn save(model: &DeepOnet, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<DeepOnet> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf).map_err(|reason| Error::ModelFile {
        path: path.to_path_buf(),
        reason,
    })
}

/// Loads a model and checks that it was built from `expected`.
pub fn load_expecting(path: &Path, expected: &DeepOnetSpec) -> Result<DeepOnet> {
    let model = load(path)?;
    if &model.spec != expected {
        return Err(Error::ModelFile {
            path: path.to_path_buf(),
            reason: "architecture does not match the expected specification".into(),
        });
    }
    Ok(model)
}
