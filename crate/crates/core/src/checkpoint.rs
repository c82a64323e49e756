//! Binary checkpoint container.
//!
//! Layout, little-endian: magic `SCECKPT1`, version `u32`, entry count `u32`,
//! then per entry the name length `u32`, name bytes, dtype code `u8`, rank
//! `u32`, dims `u64 x rank` and the raw data, then a CRC32 of everything
//! before it.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SCECKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    U64 { dims: Vec<usize>, data: Vec<u64> },
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

impl Entry {
    fn code(&self) -> u8 {
        match self {
            Entry::F32(_) => 0,
            Entry::U64 { .. } => 1,
            Entry::U8 { .. } => 2,
        }
    }

    fn dims(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::U64 { dims, .. } | Entry::U8 { dims, .. } => dims,
        }
    }
}

/// Ordered named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn put(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name, entry)),
        }
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.put(name, Entry::F32(t.clone()));
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, data: Vec<u64>) {
        self.put(name, Entry::U64 { dims: vec![data.len()], data });
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, data: Vec<u8>) {
        self.put(name, Entry::U8 { dims: vec![data.len()], data });
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name)? {
            Entry::F32(t) => Ok(t),
            _ => Err(Error::Checkpoint(format!("entry {name:?} is not f32"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Entry::U64 { data, .. } => Ok(data),
            _ => Err(Error::Checkpoint(format!("entry {name:?} is not u64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            Entry::U8 { data, .. } => Ok(data),
            _ => Err(Error::Checkpoint(format!("entry {name:?} is not u8"))),
        }
    }

    /// Entries whose name starts with `prefix`, in stored order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Entry)> + 'a {
        self.entries
            .iter()
            .filter(move |(n, _)| n.starts_with(prefix))
            .map(|(n, e)| (n.as_str(), e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.code());
            out.extend_from_slice(&(e.dims().len() as u32).to_le_bytes());
            for &d in e.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match e {
                Entry::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Entry::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Entry::U8 { data, .. } => out.extend_from_slice(data),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= body.len())
                .ok_or_else(|| Error::Checkpoint(format!("entry {name:?} has implausible dims {dims:?}")))?;
            let entry = match code {
                0 => {
                    let raw = r.take(n * 4)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Entry::F32(Tensor::from_vec(dims, data).map_err(|e| Error::Checkpoint(e.to_string()))?)
                }
                1 => {
                    let raw = r.take(n * 8)?;
                    let data = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
                    Entry::U64 { dims, data }
                }
                2 => Entry::U8 { data: r.take(n)?.to_vec(), dims },
                other => return Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
            };
            ckpt.entries.push((name, entry));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes via a temporary sibling and a rename so readers never see a partial file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.put_tensor("w", &Tensor::from_vec(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap());
        c.put_u64s("step", vec![42]);
        c.put_bytes("config", b"objective.tau = 0.1\n".to_vec());
        c
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let a: Vec<u32> = c.tensor("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.tensor("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.u64s("step").unwrap(), &[42]);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), sample());
        assert!(!p.with_extension("tmp").exists());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        for i in [10, 30, bytes.len() - 10, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            let err = Checkpoint::from_bytes(&bad).unwrap_err();
            assert!(err.to_string().contains("CRC"), "{err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));

        // Version bump with a consistent CRC.
        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[8] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..6]).is_err());
    }

    #[test]
    fn typed_getters_check_kinds() {
        let c = sample();
        assert!(c.tensor("step").is_err());
        assert!(c.u64s("missing").is_err());
        assert_eq!(c.with_prefix("s").count(), 1);
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_roundtrip(
            data in proptest::collection::vec(any::<u32>(), 1..64),
            ints in proptest::collection::vec(any::<u64>(), 0..8),
        ) {
            let floats: Vec<f32> = data.iter().map(|&b| f32::from_bits(b)).collect();
            let mut c = Checkpoint::default();
            c.put_tensor("t", &Tensor::from_vec(vec![floats.len()], floats).unwrap());
            c.put_u64s("i", ints);
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            let bits = |c: &Checkpoint| c.tensor("t").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&c));
            prop_assert_eq!(back.u64s("i").unwrap(), c.u64s("i").unwrap());
        }
    }
}
