//! Binary model snapshots.
//!
//! Layout (all integers little-endian):
//!
//! | field         | type            |
//! |---------------|-----------------|
//! | magic         | 4 bytes         |
//! | n_sizes       | u32             |
//! | layer sizes   | n_sizes x u32   |
//! | activation    | u32 (0 relu, 1 tanh) |
//! | seed          | u64             |
//! | n_params      | u64             |
//! | parameters    | n_params x f64  |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{QueenError, Result};
use crate::nn::{Activation, Mlp, NetworkSpec};

pub const MODEL_MAGIC: [u8; 4] = *b"QNN1";
pub const MAPPER_MAGIC: [u8; 4] = *b"QMP1";

pub fn encode_model(model: &Mlp, magic: [u8; 4]) -> Vec<u8> {
    let spec = model.spec();
    let mut out = Vec::with_capacity(32 + 8 * model.params().len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(spec.layer_sizes.len() as u32).to_le_bytes());
    for &s in &spec.layer_sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.extend_from_slice(&spec.activation.code().to_le_bytes());
    out.extend_from_slice(&spec.seed.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(QueenError::Corrupt("unexpected end of model data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_model(bytes: &[u8], magic: [u8; 4]) -> Result<Mlp> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let found = r.take(4)?;
    if found != magic {
        return Err(QueenError::Corrupt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(&magic)
        )));
    }
    let n_sizes = r.u32()? as usize;
    if n_sizes > 1024 {
        return Err(QueenError::Corrupt("implausible layer count".into()));
    }
    let sizes = (0..n_sizes)
        .map(|_| r.u32().map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let activation = Activation::from_code(r.u32()?)
        .ok_or_else(|| QueenError::Corrupt("unknown activation code".into()))?;
    let seed = r.u64()?;
    let spec = NetworkSpec::new(sizes, activation, seed)?;
    let n_params = r.u64()? as usize;
    if n_params != spec.param_count() {
        return Err(QueenError::Corrupt(format!(
            "parameter count {n_params} does not match spec ({})",
            spec.param_count()
        )));
    }
    let raw = r.take(n_params * 8)?;
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if r.pos != bytes.len() {
        return Err(QueenError::Corrupt(
            "trailing bytes after parameters".into(),
        ));
    }
    Mlp::from_parameters(spec, params)
}

pub fn save_model(model: &Mlp, magic: [u8; 4], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_model(model, magic))?;
    Ok(())
}

pub fn load_model(path: &Path, magic: [u8; 4]) -> Result<Mlp> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_model(&buf, magic)
}
