//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MFTCKPT\0"
//! version    u32      1
//! header     u32 length + UTF-8 `key = value` lines (ModelConfig + variant)
//! count      u32      number of parameters
//! per parameter, in name order:
//!   name     u32 length + UTF-8 bytes
//!   rank     u32
//!   dims     rank × u64
//!   values   product(dims) × f64 (IEEE-754 binary64)
//! ```
//!
//! Decoding validates every length against the remaining input before
//! allocating, and rejects trailing bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::keyvalue::{self, KvDoc};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::network::Variant;

pub const MAGIC: &[u8; 8] = b"MFTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: ParameterStore,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated checkpoint reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn header_text(&self) -> String {
        let mut pairs = self.config.to_pairs();
        pairs.push(("variant".into(), self.variant.label()));
        keyvalue::render(&pairs)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = self.header_text();
        let mut out = Vec::with_capacity(64 + header.len() + self.params.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.params.len())?;
        for (name, t) in self.params.iter() {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header = r.string("header")?;
        let mut doc = KvDoc::parse(header)?;
        let mut config = ModelConfig::default();
        config.apply(&mut doc)?;
        let variant: Variant = doc
            .take("variant")?
            .ok_or_else(|| Error::Format("checkpoint header lacks variant".into()))?;
        doc.finish()?;
        config.validate()?;

        let count = r.u32("parameter count")?;
        let mut params = ParameterStore::new();
        for _ in 0..count {
            let name = r.string("parameter name")?.to_string();
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > 8 || rank * 8 > r.remaining() {
                return Err(Error::Format(format!("{name}: invalid rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64("dimension")?)
                    .map_err(|_| Error::Format(format!("{name}: dimension overflow")))?;
                numel = numel
                    .checked_mul(d)
                    .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                    .ok_or_else(|| Error::Format(format!("{name}: shape exceeds file size")))?;
                dims.push(d);
            }
            let raw = r.take(numel * 8, "values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            params
                .insert(name, t)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            config,
            variant,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModalitySpec;

    fn sample() -> Checkpoint {
        let mut params = ParameterStore::new();
        params
            .insert(
                "a/weight",
                Tensor::new(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300]).unwrap(),
            )
            .unwrap();
        params.insert("b/bias", Tensor::vector(vec![0.1])).unwrap();
        Checkpoint {
            config: ModelConfig {
                modalities: vec![
                    ModalitySpec::new("rgb", vec![4]),
                    ModalitySpec::new("depth", vec![4, 4]),
                ],
                fusion_order: vec!["rgb".into(), "depth".into()],
                ..Default::default()
            },
            variant: Variant::Full,
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.config, ck.config);
        for ((n1, t1), (n2, t2)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 2;
        assert!(Checkpoint::decode(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }
}
