//! Binary checkpoint:
//!
//! ```text
//! "DLCK" | version u32 | step u64 | rng seed u64 | rng counter u64
//! | config: len u32, utf-8 JSON
//! | tensor count u32 | per tensor: name len u32, name, rank u32, extents u64…, f32 payload
//! | index count u32  | per array:  name len u32, name, len u64, u64 values
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DLCK";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the run's random streams: every step draws from a stream keyed
/// by `(seed, counter)`, so these two words are the whole generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng: RngState,
    /// Config the run was started with.
    pub config_json: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
    /// Integer state (queue cursor, write steps, bank update steps).
    pub indices: Vec<(String, Vec<u64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Consistency(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn index(&self, name: &str) -> Result<&[u64]> {
        self.indices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Consistency(format!("checkpoint has no index array `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.step, self.rng.seed, self.rng.counter] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        put_bytes(&mut b, self.config_json.as_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut b, name.as_bytes());
            b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        for (name, v) in &self.indices {
            put_bytes(&mut b, name.as_bytes());
            b.extend_from_slice(&(v.len() as u64).to_le_bytes());
            for x in v {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic (expected \"DLCK\")".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version} is not supported by this build (reads version \
                 {FORMAT_VERSION}); retrain or convert the checkpoint with a matching build"
            )));
        }
        let step = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            counter: r.u64()?,
        };
        let config_json = r.string()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len64()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` extents overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let n = r.u32()? as usize;
        let mut indices = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let len = r.len64()?;
            let v = (0..len).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            indices.push((name, v));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after the checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            step,
            rng,
            config_json,
            tensors,
            indices,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn put_bytes(b: &mut Vec<u8>, s: &[u8]) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Format(format!("truncated checkpoint: wanted {n} bytes at offset {}", self.pos))
        })?;
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

    fn len64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("extent does not fit in memory".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            step: 42,
            rng: RngState { seed: 7, counter: 42 },
            config_json: "{}".into(),
            tensors: vec![
                ("query/w".into(), Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5 - 1.0)),
                ("query/b".into(), Tensor::from_fn(vec![3], |i| i as f32)),
            ],
            indices: vec![("queue/state".into(), vec![3, 9])],
        }
    }

    #[test]
    fn layout_matches_the_documented_format() {
        let b = sample().encode();
        assert_eq!(&b[..4], b"DLCK");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 42);
        // config, then the first tensor's name, rank and extents
        let mut p = 32;
        assert_eq!(u32::from_le_bytes(b[p..p + 4].try_into().unwrap()), 2);
        p += 4 + 2;
        assert_eq!(u32::from_le_bytes(b[p..p + 4].try_into().unwrap()), 2);
        p += 4;
        assert_eq!(u32::from_le_bytes(b[p..p + 4].try_into().unwrap()), 7);
        assert_eq!(&b[p + 4..p + 11], b"query/w");
        p += 11;
        assert_eq!(u32::from_le_bytes(b[p..p + 4].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[p + 4..p + 12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[p + 12..p + 20].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(b[p + 20..p + 24].try_into().unwrap()), -1.0);
    }

    #[test]
    fn encode_decode_encode_is_byte_identical() {
        let a = sample().encode();
        let c = Checkpoint::decode(&a).unwrap();
        assert_eq!(c, sample());
        assert_eq!(c.encode(), a);
    }

    #[test]
    fn malformed_files_are_format_errors() {
        let good = sample().encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut old = good.clone();
        old[4..8].copy_from_slice(&0u32.to_le_bytes());
        let err = Checkpoint::decode(&old).unwrap_err();
        assert!(matches!(&err, Error::Format(m) if m.contains("version 0") && m.contains("retrain")));
        for cut in [3, 10, good.len() - 1] {
            assert!(matches!(Checkpoint::decode(&good[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut long = good;
        long.push(0);
        assert!(matches!(Checkpoint::decode(&long), Err(Error::Format(_))));
    }
}
