//! `MITU` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MITU" | version u32 | count u32
//! count × { name_len u16 | name (UTF-8) | rank u8 | extents u32×rank | offset u64 }
//! payload: contiguous f32 values
//! ```
//!
//! `offset` is the byte offset of the tensor's values from the start of the
//! payload section.

use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MITU";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.entries.push(CheckpointEntry {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Checkpoint("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            let name = e.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("name too long: {}", e.name)))?;
            let rank = u8::try_from(e.shape.len())
                .map_err(|_| Error::Checkpoint(format!("rank too large: {}", e.name)))?;
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} does not match {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &d in &e.shape {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Checkpoint(format!("extent too large: {}", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * e.data.len() as u64;
        }
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a MITU checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            headers.push((name, shape, offset));
        }
        let payload = &buf[r.pos..];
        let entries = headers
            .into_iter()
            .map(|(name, shape, offset)| {
                let n: usize = shape.iter().product();
                let start = usize::try_from(offset).ok();
                let bytes = start
                    .and_then(|s| s.checked_add(4 * n).map(|e| (s, e)))
                    .and_then(|(s, e)| payload.get(s..e))
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: payload out of bounds")))?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                    .collect();
                Ok(CheckpointEntry { name, shape, data })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint { entries })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| Error::file(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push("enc.stage1.block1.attn.q.weight", &[2, 3], vec![1.0, -2.5, 3.0, 0.0, -0.0, 7.25]);
        c.push("dec.head.bias", &[3], vec![0.1, 0.2, 0.3]);
        c
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MITU");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], b"enc.stage1.block1.attn.q.weight");
        assert_eq!(bytes[14 + name_len], 2);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            tensors in prop::collection::vec(
                ("[a-z.]{1,12}", prop::collection::vec(1usize..4, 1..4), any::<u32>()),
                0..5,
            )
        ) {
            let mut c = Checkpoint::default();
            for (name, shape, seed) in tensors {
                let n: usize = shape.iter().product();
                let data = (0..n as u32).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i))).collect();
                c.push(name, &shape, data);
            }
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            for (a, b) in c.entries.iter().zip(&back.entries) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.shape, &b.shape);
                let (ab, bb): (Vec<u32>, Vec<u32>) = (a.data.iter().map(|v| v.to_bits()).collect(), b.data.iter().map(|v| v.to_bits()).collect());
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
