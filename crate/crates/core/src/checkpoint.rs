//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DCCM"  u32 version
//! u32 len, config JSON (UTF-8)
//! u32 count, then per parameter:  u32 len, name, u32 rank, u64 dims[rank], f64 data
//! u32 count, optimizer tensors in the same scheme
//! u64 epoch
//! RNG: 32-byte seed, u64 stream, u128 word position
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCCM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_json: String,
    pub params: Vec<NamedTensor>,
    pub optimizer: Vec<NamedTensor>,
    pub epoch: u64,
    pub rng: RngState,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors(out: &mut Vec<u8>, ts: &[NamedTensor]) {
    out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for nt in ts {
        put_str(out, &nt.name);
        out.extend_from_slice(&(nt.tensor.rank() as u32).to_le_bytes());
        for &d in nt.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in nt.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.config_json);
        put_tensors(&mut out, &self.params);
        put_tensors(&mut out, &self.optimizer);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad checkpoint magic (expected DCCM)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_json = r.string("config")?;
        let params = r.tensors("parameters")?;
        let optimizer = r.tensors("optimizer state")?;
        let epoch = r.u64("epoch")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.remaining())));
        }
        Ok(Checkpoint { version, config_json, params, optimizer, epoch, rng: RngState { seed, stream, word_pos } })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Cursor over a byte buffer whose reads fail with a format error naming
/// the field and the expected vs available byte counts.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated {what} at offset {}: expected {n} bytes, found {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    /// `u32 rank, u64 dims, f64 payload`.
    pub fn tensor_body(&mut self) -> Result<Tensor> {
        let rank = self.u32("tensor rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor shape {shape:?} overflows")))?;
        let need = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("tensor shape {shape:?} overflows")))?;
        let raw = self.take(need, "tensor payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    fn tensors(&mut self, what: &str) -> Result<Vec<NamedTensor>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = self.string(what)?;
            let tensor = self.tensor_body()?;
            out.push(NamedTensor { name, tensor });
        }
        Ok(out)
    }
}
