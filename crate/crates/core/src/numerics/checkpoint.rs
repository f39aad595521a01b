//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "HSTCKPT1"
//! meta_len   u32       length of the metadata block
//! meta       bytes     UTF-8 text (model configuration, key = value lines)
//! count      u32       number of parameters
//! repeated count times:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims: ndim x u32
//!   values   product(dims) x f64
//! ```
//!
//! Values are stored bit-exactly, so a save/load round trip reproduces the
//! model output bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::nn::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HSTCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: &str) -> Self {
        Checkpoint {
            metadata: metadata.into(),
            params: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.metadata.len());
        out.extend_from_slice(self.metadata.as_bytes());
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic header, expected HSTCKPT1".into()));
        }
        let meta_len = r.u32()?;
        let metadata = r.string(meta_len)?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()?;
            let name = r.string(len)?;
            let ndim = r.u32()?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()?);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let b = r.take(8)?;
                data.push(f64::from_le_bytes(b.try_into().unwrap()));
            }
            params.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { metadata, params })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
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

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::new(&[2, 2], alloc::vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0]).unwrap()).unwrap();
        store.add("b", Tensor::scalar(core::f64::consts::PI)).unwrap();
        let ck = Checkpoint::from_store(&store, "h = 8\n");
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let ck = Checkpoint { metadata: String::new(), params: Vec::new() };
        let mut bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..6]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::decode(&bytes).is_err());
    }
}
