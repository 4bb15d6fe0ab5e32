//! Binary tensor files.
//!
//! Layout: `b"DTNS"`, version byte (1), dtype byte (0 = f32, 1 = f64), rank
//! byte, `rank` little-endian u64 extents, then the values in little-endian
//! row-major order.

use std::io::{Read, Write};

use super::{numel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DTNS";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} too large", t.rank())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype as u8, rank])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated tensor".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

/// Reads one tensor, returning it with the dtype it was stored as.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Tensor, DType)> {
    let head = read_exact(r, 7)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {}", head[4])));
    }
    let dtype = match head[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = read_exact(r, 8)?;
        let d = u64::from_le_bytes(b.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    let width = if dtype == DType::F64 { 8 } else { 4 };
    let raw = read_exact(r, n * width)?;
    let data = match dtype {
        DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    debug_assert_eq!(numel(&shape), n);
    Ok((Tensor::new(&shape, data)?, dtype))
}

pub fn save(path: &std::path::Path, t: &Tensor, dtype: DType) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t, dtype)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(read_tensor(&mut f)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = vec![];
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        assert_eq!(&buf[..4], b"DTNS");
        assert_eq!(&buf[4..7], &[1, 1, 2]);
        assert_eq!(&buf[7..15], &2u64.to_le_bytes());
        assert_eq!(&buf[15..23], &1u64.to_le_bytes());
        assert_eq!(&buf[23..31], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 7 + 16 + 16);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_tensor(&mut &b"XXXX\x01\x01\x00"[..]), Err(Error::Format(_))));
        assert!(matches!(read_tensor(&mut &b"DTNS\x01\x01\x01"[..]), Err(Error::Format(_))));
        assert!(matches!(read_tensor(&mut &b"DTNS\x01\x07\x00"[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn f64_roundtrip_is_bit_exact(shape in prop::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n as u64).map(|i| f64::from_bits(seed.wrapping_mul(i + 1) & 0x7fef_ffff_ffff_ffff)).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let mut buf = vec![];
            write_tensor(&mut buf, &t, DType::F64).unwrap();
            let (back, dt) = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(dt, DType::F64);
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u64> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn f32_roundtrip_is_stable(vals in prop::collection::vec(-1e6f32..1e6, 1..20)) {
            let t = Tensor::new(&[vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let mut buf = vec![];
            write_tensor(&mut buf, &t, DType::F32).unwrap();
            let (back, _) = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.to_vec(), t.to_vec());
        }
    }
}
