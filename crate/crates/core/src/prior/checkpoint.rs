//! Binary checkpoint for [`ToyDenoiser`]. All integers are `u32` little-endian, all weights
//! `f64` little-endian:
//!
//! ```text
//! magic            8 bytes  "GDPRIOR1"
//! hidden_channels  u32
//! cond_channels    u32
//! embed_dim        u32
//! train_steps      u32
//! n_layers         u32
//! dilations        n_layers × u32
//! n_tensors        u32
//! shape table      n_tensors × (rank u32, rank × dim u32)
//! weights          Σ prod(dims) × f64, tensors in table order, row-major
//! ```
//!
//! The tensor order is the one given by `ToyArchitecture::tensor_shapes`. Trailing bytes are
//! rejected, so a checkpoint round-trips bit-exactly.

use std::io::Write;
use std::path::Path;

use super::toy::{Tensor, ToyArchitecture, ToyDenoiser};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"GDPRIOR1";
const FORMAT: &str = "GDPRIOR1 checkpoint";

pub fn encode_checkpoint(model: &ToyDenoiser) -> Vec<u8> {
    let arch = model.architecture();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let put = |v: usize, out: &mut Vec<u8>| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(arch.hidden_channels, &mut out);
    put(arch.cond_channels, &mut out);
    put(arch.embed_dim, &mut out);
    put(arch.train_steps, &mut out);
    put(arch.dilations.len(), &mut out);
    for &d in &arch.dilations {
        put(d, &mut out);
    }
    put(model.tensors().len(), &mut out);
    for t in model.tensors() {
        put(t.shape.len(), &mut out);
        for &d in &t.shape {
            put(d, &mut out);
        }
    }
    for t in model.tensors() {
        for v in &t.data {
            out.write_all(&v.to_le_bytes()).expect("vec write");
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedData {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::MalformedHeader {
        format: FORMAT,
        detail: detail.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyDenoiser> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| malformed("file shorter than the magic"))? != MAGIC {
        return Err(malformed("bad magic"));
    }
    let hidden_channels = r.u32()?;
    let cond_channels = r.u32()?;
    let embed_dim = r.u32()?;
    let train_steps = r.u32()?;
    let n_layers = r.u32()?;
    if n_layers > 1024 {
        return Err(malformed(format!("implausible layer count {n_layers}")));
    }
    let dilations = (0..n_layers).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let arch = ToyArchitecture {
        hidden_channels,
        cond_channels,
        dilations,
        embed_dim,
        train_steps,
    };
    arch.validate().map_err(|e| malformed(e.to_string()))?;
    let n_tensors = r.u32()?;
    let expected = arch.tensor_shapes();
    if n_tensors != expected.len() {
        return Err(malformed(format!(
            "{n_tensors} tensors, architecture needs {}",
            expected.len()
        )));
    }
    let mut shapes = Vec::with_capacity(n_tensors);
    for want in &expected {
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if shape != *want {
            return Err(malformed(format!("tensor shape {shape:?}, expected {want:?}")));
        }
        shapes.push(shape);
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for shape in shapes {
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ToyDenoiser::from_tensors(arch, tensors)
}

pub fn save_checkpoint(model: &ToyDenoiser, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyDenoiser> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> ToyDenoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        ToyDenoiser::new(ToyArchitecture::default(), &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode_checkpoint(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::MalformedHeader { .. })));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::TruncatedData { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::MalformedHeader { .. })));
    }
}
