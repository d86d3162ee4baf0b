//! Named-tensor container used for checkpoints and precomputed priors.
//!
//! ```text
//! magic   8 bytes  "SKFTENS\0"
//! version u32 LE
//! count   u32 LE
//! count x { name_len u32, name utf-8, ndim u32, dims u64 x ndim, values f64 LE x prod(dims) }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SKFTENS\0";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
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
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::load(self.path, format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::load(path, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::load(path, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::load(path, format!("entry {i}: name is not utf-8")))?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim).map(|_| r.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::load(path, "tensor too large"))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::load(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(path, &fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let entries = vec![
            ("a".to_string(), Tensor::new(vec![2, 3], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap()),
            ("b.c".to_string(), Tensor::scalar(f64::MIN_POSITIVE)),
        ];
        let bytes = encode(&entries);
        let p = Path::new("mem");
        assert_eq!(decode(p, &bytes).unwrap(), entries);
        let err = decode(p, &bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(decode(p, &bad).unwrap_err().to_string().contains("version 7"));
    }
}
