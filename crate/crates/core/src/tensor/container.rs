//! Little-endian binary tensor records.
//!
//! Layout of one record:
//!
//! ```text
//! b"ACTN" | rank: u32 | dims: rank × u32 | payload: numel × f64
//! ```
//!
//! Files may hold several records back to back.

use std::io::{self, Read, Write};

use super::{Result, Tensor, TensorError};

pub const MAGIC: [u8; 4] = *b"ACTN";

pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        let d = u32::try_from(d)
            .map_err(|_| TensorError::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensors<'a, W: Write>(
    w: &mut W,
    tensors: impl IntoIterator<Item = &'a Tensor>,
) -> Result<()> {
    for t in tensors {
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| truncated(e, what))?;
    Ok(u32::from_le_bytes(buf))
}

fn truncated(e: io::Error, what: &str) -> TensorError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        TensorError::Format(format!("truncated while reading {what}"))
    } else {
        TensorError::Io(e)
    }
}

/// Reads one record. Returns `Ok(None)` on a clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(TensorError::Format("truncated magic".into())),
            n => got += n,
        }
    }
    if magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(r, "rank")? as usize;
    if rank > 16 {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "dims")? as usize);
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::Format(format!("zero dimension in {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| truncated(e, "payload"))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data).map(Some)
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while let Some(t) = read_tensor(r)? {
        out.push(t);
    }
    Ok(out)
}
