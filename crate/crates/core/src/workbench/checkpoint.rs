//! Named-tensor checkpoints.
//!
//! Layout, all integers little-endian:
//! `"PFCK"`, `u32` version, `u32` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, a `u8` dtype tag (0 = f64), a `u32` rank,
//! `rank` `u64` extents and the raw f64 payload. A CRC32 of everything
//! before it closes the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PFCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint, checking magic, version and CRC first.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if store.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode(&std::fs::read(path)?)
}

/// Copies every tensor of `source` whose name also exists in `target`,
/// returning the copied names. Shapes must agree.
pub fn load_matching(target: &mut ParamStore, source: &ParamStore) -> Result<Vec<String>> {
    let mut copied = Vec::new();
    for (name, p) in source.iter() {
        if !target.contains(name) {
            continue;
        }
        let have = target.get(name)?.shape();
        if have != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?} does not match model shape {have:?}",
                p.value.shape()
            )));
        }
        target.set(name, p.value.clone())?;
        copied.push(name.to_string());
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn store() -> ParamStore {
        let mut rng = Rng::seed(4);
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::randn([3, 3, 2, 4], 1.0, &mut rng));
        s.insert("a.bias", Tensor::randn([4], 1.0, &mut rng));
        s.insert("scalar", Tensor::scalar(f64::MIN_POSITIVE));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back.len(), s.len());
        for (name, p) in s.iter() {
            assert!(back.get(name).unwrap().bit_eq(&p.value));
        }
        assert_eq!(encode(&back), encode(&s));
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode(&store());
        for pos in [8, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        }
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"nope").is_err());
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = encode(&store());
        bytes[4] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn matching_load_checks_shapes() {
        let src = store();
        let mut dst = ParamStore::new();
        dst.insert("a.bias", Tensor::zeros([4]));
        dst.insert("other", Tensor::zeros([1]));
        assert_eq!(load_matching(&mut dst, &src).unwrap(), vec!["a.bias".to_string()]);
        assert!(dst.get("a.bias").unwrap().bit_eq(src.get("a.bias").unwrap()));
        dst.insert("scalar", Tensor::zeros([2]));
        assert!(load_matching(&mut dst, &src).is_err());
    }
}
