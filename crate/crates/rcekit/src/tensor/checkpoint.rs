//! Binary checkpoint format for named tensors.
//!
//! Layout (all integers little-endian):
//!   magic "RCE1" | version u32 | tensor count u32 | per tensor:
//!   name length u32 | UTF-8 name | rank u32 | extents u32 each | f64 data
//!
//! The encoding is bit-exact: writing and re-reading reproduces every f64
//! payload identically, which is what the determinism checks compare.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RCE1";
pub const FORMAT_VERSION: u32 = 1;

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::Parse(format!("truncated checkpoint reading {what} at offset {}", self.offset)))?;
        self.offset += buf.len();
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { inner: BufReader::new(File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse(format!("bad checkpoint magic {magic:?} at offset 0")));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Parse(format!("tensor name is not UTF-8 near offset {}", cur.offset)))?;
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            cur.read_exact(&mut b, "tensor data")?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rce");
        let tensors = vec![
            ("w".to_string(), Tensor::new(vec![2, 3], vec![0.1, -2.5, 3e-300, 1e300, 0.0, -0.0]).unwrap()),
            ("b".to_string(), Tensor::from_vec(vec![f64::MIN_POSITIVE, 1.0 / 3.0])),
        ];
        save(&path, &tensors).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), tensors.len());
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.rce");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn rejects_truncation_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rce");
        save(&path, &[("w".into(), Tensor::from_vec(vec![1.0, 2.0, 3.0]))]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 4]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("offset"), "{err}");
    }
}
