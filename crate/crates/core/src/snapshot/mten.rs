//! MTEN: `b"MTEN"`, u32 version, u8 dtype (0 = f32, 1 = f64), u8 ndim (1..=8),
//! `ndim` u64 dims, then the row-major payload. Everything little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MTEN";
pub const VERSION: u32 = 1;
const MAX_DIMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode_tensor(mut bytes: &[u8]) -> Result<Tensor> {
    let b = &mut bytes;
    if take(b, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not an MTEN file".into()));
    }
    let version = u32::from_le_bytes(take(b, 4, "header")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = match take(b, 1, "header")?[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let ndim = take(b, 1, "header")?[0] as usize;
    if !(1..=MAX_DIMS).contains(&ndim) {
        return Err(Error::Format(format!("ndim {ndim} outside 1..=8")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(b, 8, "dims")?.try_into().unwrap());
        shape.push(
            usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?,
        );
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.width()).map(|bytes| (n, bytes)))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let (n, len) = count;
    if b.len() != len {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {len}",
            b.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    debug_assert_eq!(data.len(), n);
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

/// Encodes `t`; with [`Dtype::F32`] values are rounded to nearest.
pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    if !(1..=MAX_DIMS).contains(&t.ndim()) {
        return Err(Error::Format(format!(
            "cannot store a {}-dimensional tensor",
            t.ndim()
        )));
    }
    let mut out = Vec::with_capacity(10 + 8 * t.ndim() + t.len() * dtype.width());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_tensor_as(path, t, Dtype::F64)
}

pub fn write_tensor_as(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let bytes = encode_tensor(t, dtype)?;
    super::write_atomic(path.as_ref(), |w| w.write_all(&bytes))
}
