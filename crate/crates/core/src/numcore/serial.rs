//! Binary tensor serialization shared with network checkpoints.
//!
//! Layout: magic bytes `LGAD`, format version (u32 LE), tensor count
//! (u32 LE), then per tensor: name length (u32 LE) + UTF-8 name, four u32 LE
//! dims (N, C, H, W), and the raw f32 LE payload.

use std::io::{Read, Write};

use super::tensor::{Dims, Tensor};
use super::{NumError, Result};

pub const MAGIC: &[u8; 4] = b"LGAD";
pub const FORMAT_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| NumError::Format(format!("reading {what}: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, FORMAT_VERSION)?;
    write_u32(w, tensors.len() as u32)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        write_u32(w, bytes.len() as u32)?;
        w.write_all(bytes)?;
        let d = t.dims();
        for v in [d.n, d.c, d.h, d.w] {
            write_u32(w, v as u32)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| NumError::Format(format!("reading magic: {e}")))?;
    if &magic != MAGIC {
        return Err(NumError::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(NumError::Format(format!("unsupported format version {version}")));
    }
    let count = read_u32(r, "tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = read_u32(r, "name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|e| NumError::Format(format!("reading name of tensor {i}: {e}")))?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| NumError::Format(format!("tensor {i} name not UTF-8: {e}")))?;
        let n = read_u32(r, "dim n")? as usize;
        let c = read_u32(r, "dim c")? as usize;
        let h = read_u32(r, "dim h")? as usize;
        let w = read_u32(r, "dim w")? as usize;
        let dims = Dims::new(n, c, h, w);
        let mut data = vec![0f32; dims.len()];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|e| NumError::Format(format!("reading payload of '{name}': {e}")))?;
            *v = f32::from_le_bytes(buf);
        }
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_order_and_bits() {
        let a = Tensor::<f32>::from_fn(Dims::new(2, 3, 1, 4), |n, c, _, x| {
            (n as f32 - 0.5) * (c as f32 + 0.25) + x as f32 * 1e-3
        });
        let b = Tensor::<f32>::full(Dims::new(1, 1, 1, 1), -7.125);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("conv.weight", &a), ("conv.bias", &b)]).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "conv.weight");
        assert_eq!(back[0].1.data(), a.data());
        assert_eq!(back[1].0, "conv.bias");
        assert_eq!(back[1].1.data(), b.data());
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_tensors(&mut &b"NOPE\x01\x00\x00\x00"[..]);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let a = Tensor::<f32>::zeros(Dims::new(1, 1, 2, 2));
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("t", &a)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensors(&mut buf.as_slice()).is_err());
    }
}
