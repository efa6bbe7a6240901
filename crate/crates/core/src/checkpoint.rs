//! Binary checkpoint format.
//!
//! ```text
//! magic      7 bytes   "FRCKPT1"
//! tag_len    u64 LE    byte length of the architecture tag
//! tag        tag_len   UTF-8, e.g. "smallcnn-v1:3x32:16:32:128:10"
//! 8 tensors, in order conv1.kernels, conv1.bias, conv2.kernels, conv2.bias,
//!            fc1.weight, fc1.bias, fc2.weight, fc2.bias; each as
//!   rank     u64 LE
//!   dims     rank × u64 LE
//!   data     product(dims) × f64 LE (IEEE-754 binary64), row-major
//! ```
//!
//! Nothing follows the last tensor; trailing bytes are rejected.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"FRCKPT1";

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.param_count() * 8);
    out.extend_from_slice(MAGIC);
    let tag = params.arch.tag();
    out.extend_from_slice(&(tag.len() as u64).to_le_bytes());
    out.extend_from_slice(tag.as_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<ModelParams> {
    let fail = |m: String| Error::format(origin, m);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(fail)? != MAGIC {
        return Err(fail("bad magic, not an FRCKPT1 checkpoint".into()));
    }
    let tag_len = r.u64().map_err(fail)? as usize;
    if tag_len > 256 {
        return Err(fail(format!("implausible tag length {tag_len}")));
    }
    let tag = std::str::from_utf8(r.take(tag_len).map_err(fail)?)
        .map_err(|_| fail("architecture tag is not UTF-8".into()))?;
    let arch = Architecture::from_tag(tag).map_err(|e| fail(e.to_string()))?;
    let mut params = ModelParams::zeros(arch)?;
    for (i, slot) in params.tensors_mut().into_iter().enumerate() {
        let rank = r.u64().map_err(fail)? as usize;
        if rank != slot.shape().len() {
            return Err(fail(format!(
                "tensor {i}: rank {rank}, expected {}",
                slot.shape().len()
            )));
        }
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fail)?;
        if dims != slot.shape() {
            return Err(fail(format!(
                "tensor {i}: shape {dims:?}, expected {:?}",
                slot.shape()
            )));
        }
        let raw = r.take(slot.len() * 8).map_err(fail)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *slot = Tensor::new(dims, data).map_err(|e| fail(format!("tensor {i}: {e}")))?;
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    params.revision = 0;
    Ok(params)
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(params))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
