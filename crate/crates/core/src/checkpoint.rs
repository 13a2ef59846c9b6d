//! Binary tensor container shared by model checkpoints and packed batches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"HBRT"
//! version  u32 = 1
//! count    u32
//! count × {
//!     name_len u32, name [u8; name_len] (UTF-8),
//!     rank u32, dims [u32; rank],
//!     data [f32; product(dims)] row-major
//! }
//! ```
//!
//! Tensors are written in name order, so equal parameter sets serialize to
//! identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"HBRT";
pub const VERSION: u32 = 1;

pub fn write_to<W: Write>(params: &ParamSet<f32>, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes(params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    write_to(params, &mut out).expect("writing to a Vec cannot fail");
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let dims = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| {
            Error::Checkpoint(format!("tensor `{name}` too large"))
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor::from_vec(&dims, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(params)
}

pub fn save(params: &ParamSet<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamSet<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[1, 2], vec![1.0f32, -2.0]).unwrap());
        let b = to_bytes(&p);
        assert_eq!(&b[..4], b"HBRT");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'w');
        assert_eq!(&b[17..21], &2u32.to_le_bytes());
        assert_eq!(&b[29..33], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 37);
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_bytes(b"NOPE").is_err());
        let mut p = ParamSet::new();
        p.insert("w", Tensor::<f32>::zeros(&[3]));
        let b = to_bytes(&p);
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(tensors in proptest::collection::btree_map(
            "[a-z.0-9]{1,12}",
            (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
                proptest::collection::vec(-1e6f32..1e6, r * c).prop_map(move |d| (r, c, d))
            }),
            0..6,
        )) {
            let p: ParamSet<f32> = tensors
                .into_iter()
                .map(|(k, (r, c, d))| (k, Tensor::from_vec(&[r, c], d).unwrap()))
                .collect();
            let back = from_bytes(&to_bytes(&p)).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
