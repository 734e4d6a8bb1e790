//! Binary parameter container.
//!
//! Layout: the magic bytes `SLRF1`, then one record per parameter until EOF:
//! name length (u32 LE), UTF-8 name bytes, rank (u32 LE), each dim (u32 LE),
//! then the values as f32 LE in row-major order.

use std::fs;
use std::path::Path;

use super::store::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"SLRF1";

pub fn to_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for p in store.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore<f32>> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Checkpoint("missing SLRF1 magic".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store
            .insert(&name, Tensor::from_vec(&shape, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_stable() {
        let mut s = ParamStore::new();
        s.insert("ab", Tensor::from_vec(&[2], vec![1.0f32, -2.5]).unwrap()).unwrap();
        let bytes = to_bytes(&s);
        let mut want = b"SLRF1".to_vec();
        want.extend_from_slice(&[2, 0, 0, 0, b'a', b'b', 1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(from_bytes(b"NOPE!").is_err());
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]).unwrap()).unwrap();
        let bytes = to_bytes(&s);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            tensors in prop::collection::vec(
                (prop::collection::vec(1usize..4, 1..4), any::<u32>()),
                0..5,
            )
        ) {
            let mut s = ParamStore::new();
            for (i, (shape, seed)) in tensors.iter().enumerate() {
                let n: usize = shape.iter().product();
                // arbitrary bit patterns, including NaN payloads and subnormals
                let data = (0..n as u32).map(|k| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(k))).collect();
                s.insert(&format!("p{i}.w"), Tensor::from_vec(shape, data).unwrap()).unwrap();
            }
            let bytes = to_bytes(&s);
            let back = from_bytes(&bytes).unwrap();
            prop_assert_eq!(to_bytes(&back), bytes);
            for (a, b) in s.params().iter().zip(back.params()) {
                prop_assert_eq!(&a.name, &b.name);
                let bits_a: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
