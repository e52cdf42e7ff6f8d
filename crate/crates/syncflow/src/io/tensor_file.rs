//! SYTF: a minimal binary tensor container.
//!
//! Layout: magic "SYTF", version u16 LE, rank u16 LE, dims as u32 LE each,
//! dtype u8 (0 = f32), then the row-major little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"SYTF";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_tensor_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let rank = t.rank() as u16;
    w.write_all(&rank.to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&[DTYPE_F32])?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("truncated tensor file (magic)".to_string()))?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad tensor magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported tensor version {version}"
        )));
    }
    let rank = read_u16(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)
        .map_err(|_| Error::format("truncated tensor file (dtype)".to_string()))?;
    if dtype[0] != DTYPE_F32 {
        return Err(Error::format(format!("unknown dtype code {}", dtype[0])));
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::format("truncated tensor payload".to_string()))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    // bypass the finite check: checkpoints must round-trip raw bits
    Ok(Tensor::from_parts(shape, data))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + t.numel() * 4);
    write_tensor_to(&mut buf, t)?;
    super::atomic_write(path, &buf)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut cursor = std::io::Cursor::new(bytes);
    let t = read_tensor_from(&mut cursor)?;
    let pos = cursor.position() as usize;
    if pos != cursor.get_ref().len() {
        return Err(Error::format(format!(
            "trailing bytes in tensor file {}",
            path.display()
        )));
    }
    Ok(t)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("truncated tensor header".to_string()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("truncated tensor header".to_string()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SplitMix64;

    #[test]
    fn roundtrip_is_bitwise() {
        let mut rng = SplitMix64::new(1);
        let t = Tensor::randn(&[3, 5, 2], 1.0, &mut rng);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let back = read_tensor_from(&mut buf.as_slice()).unwrap();
        assert!(t.bit_eq(&back));
    }

    #[test]
    fn rejects_bad_magic_version_dtype() {
        let t = Tensor::zeros(&[2]);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor_from(&mut bad.as_slice()).is_err());

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_tensor_from(&mut bad.as_slice()).is_err());

        let mut bad = buf.clone();
        // dtype byte sits after magic+version+rank+dims
        let dtype_pos = 4 + 2 + 2 + 4;
        bad[dtype_pos] = 7;
        assert!(read_tensor_from(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn truncation_is_detected() {
        let t = Tensor::zeros(&[4, 4]);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor_from(&mut buf.as_slice()).is_err());
    }
}
