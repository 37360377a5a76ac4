//! MTEN: a minimal bit-exact tensor container.
//!
//! ```text
//! "MTEN" | version u8 = 1 | dtype u8 (0 f32, 1 f64) | rank u8 | reserved u8 = 0
//! dims: rank x u32 LE | payload: row-major LE values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"MTEN";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 8;

pub fn header_len(rank: usize) -> usize {
    8 + 4 * rank
}

/// A decoded tensor in whichever precision it was stored.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn cast<T: Float>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    /// The tensor if it was stored as `T`, without conversion.
    pub fn exact<T: Float>(self) -> Option<Tensor<T>> {
        match self {
            AnyTensor::F32(t) if T::DTYPE == DType::F32 => Some(t.cast()),
            AnyTensor::F64(t) if T::DTYPE == DType::F64 => Some(t.cast()),
            _ => None,
        }
    }
}

pub fn encode_into<T: Float>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() > MAX_RANK {
        return Err(Error::Contract(format!("MTEN supports rank <= {MAX_RANK}, got {}", t.rank())));
    }
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE.code(), t.rank() as u8, 0]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Contract(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn encode<T: Float>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(header_len(t.rank()) + t.numel() * T::DTYPE.size());
    encode_into(t, &mut out)?;
    Ok(out)
}

fn fmt_err<R>(offset: usize, msg: impl Into<String>) -> Result<R> {
    Err(Error::Format { offset, msg: msg.into() })
}

fn payload<T: Float>(bytes: &[u8], shape: Vec<usize>) -> Tensor<T> {
    let size = T::DTYPE.size();
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_parts(shape, data)
}

/// Decodes one record starting at `bytes[0]`; `base` is the absolute offset
/// of that byte, used in error messages. Returns the tensor and the number
/// of bytes consumed.
pub fn decode_at(bytes: &[u8], base: usize) -> Result<(AnyTensor, usize)> {
    if bytes.len() < 8 {
        return fmt_err(base + bytes.len(), format!("truncated header: {} of 8 bytes", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return fmt_err(base, format!("bad magic {:?}, expected \"MTEN\"", String::from_utf8_lossy(&bytes[..4])));
    }
    if bytes[4] != VERSION {
        return fmt_err(base + 4, format!("unsupported version {}", bytes[4]));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        d => return fmt_err(base + 5, format!("unsupported dtype code {d}")),
    };
    let rank = bytes[6] as usize;
    if rank > MAX_RANK {
        return fmt_err(base + 6, format!("rank {rank} exceeds {MAX_RANK}"));
    }
    if bytes[7] != 0 {
        return fmt_err(base + 7, format!("reserved byte is {}, expected 0", bytes[7]));
    }
    let hl = header_len(rank);
    if bytes.len() < hl {
        return fmt_err(base + bytes.len(), format!("truncated dims: header needs {hl} bytes"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for i in 0..rank {
        let off = 8 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return fmt_err(base + off, format!("dimension {i} is zero"));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Format { offset: base + off, msg: "element count overflows".into() })?;
        shape.push(d);
    }
    let plen = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format { offset: base + hl, msg: "payload size overflows".into() })?;
    let avail = bytes.len() - hl;
    if avail < plen {
        return fmt_err(base + bytes.len(), format!("truncated payload: {avail} of {plen} bytes"));
    }
    let body = &bytes[hl..hl + plen];
    let t = match dtype {
        DType::F32 => AnyTensor::F32(payload(body, shape)),
        DType::F64 => AnyTensor::F64(payload(body, shape)),
    };
    Ok((t, hl + plen))
}

/// Decodes a buffer holding exactly one record.
pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let (t, used) = decode_at(bytes, 0)?;
    if used != bytes.len() {
        return fmt_err(used, format!("{} trailing bytes after payload", bytes.len() - used));
    }
    Ok(t)
}

pub fn write_mten<T: Float>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}

/// Reads a tensor, converting to `T` if it was stored in the other precision.
pub fn read_mten<T: Float>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(read_any(path)?.cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bitwise() {
        let t = Tensor::<f32>::from_f64(&[2, 3], &[1.0, -0.0, f32::MIN_POSITIVE as f64, 3.5, 1e30, -7.25]).unwrap();
        let back = decode(&encode(&t).unwrap()).unwrap().exact::<f32>().unwrap();
        assert!(back.bitwise_eq(&t));
        let d = Tensor::<f64>::from_fn(&[3, 1, 2], |i| (i as f64).sqrt() * std::f64::consts::PI);
        assert!(decode(&encode(&d).unwrap()).unwrap().exact::<f64>().unwrap().bitwise_eq(&d));
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::zeros(&[1, 2, 3, 4]);
        let b = encode(&t).unwrap();
        assert_eq!(header_len(4), 24);
        assert_eq!(b.len(), 24 + 24 * 4);
        assert_eq!(&b[..8], &[b'M', b'T', b'E', b'N', 1, 0, 4, 0]);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[20..24], &4u32.to_le_bytes());
    }

    #[test]
    fn one_element_tensor() {
        let t = Tensor::<f64>::scalar(2.5);
        let b = encode(&t).unwrap();
        assert_eq!(b.len(), header_len(t.rank()) + 8);
        assert_eq!(decode(&b).unwrap().cast::<f64>().data(), &[2.5]);
    }

    #[test]
    fn corrupt_inputs_name_offsets() {
        let good = encode(&Tensor::<f32>::ones(&[2, 2])).unwrap();
        let expect = |bytes: &[u8], at: usize| match decode(bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, at),
            other => panic!("expected format error at {at}, got {other:?}"),
        };
        let mut b = good.clone();
        b[0] = b'X';
        expect(&b, 0);
        let mut b = good.clone();
        b[4] = 2;
        expect(&b, 4);
        let mut b = good.clone();
        b[5] = 7;
        expect(&b, 5);
        let mut b = good.clone();
        b[7] = 1;
        expect(&b, 7);
        expect(&good[..good.len() - 1], good.len() - 1);
        expect(&good[..5], 5);
        let mut b = good.clone();
        b.push(0);
        expect(&b, good.len());
        let mut b = good.clone();
        b[8..12].copy_from_slice(&0u32.to_le_bytes());
        expect(&b, 8);
    }

    #[test]
    fn precision_conversion_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mten");
        write_mten(&p, &Tensor::<f64>::from_f64(&[2], &[0.5, 1.25]).unwrap()).unwrap();
        let t: Tensor<f32> = read_mten(&p).unwrap();
        assert_eq!(t.data(), &[0.5, 1.25]);
    }
}
