//! `LTSR` tensor container.
//!
//! Layout: `b"LTSR"`, version byte, dtype byte (0 = f32, 1 = f64), rank byte,
//! one reserved zero byte, `rank` little-endian `u32` extents, then the
//! row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"LTSR";
pub const VERSION: u8 = 1;
const HEADER: usize = 8;

fn format_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        field,
        detail: detail.into(),
    }
}

pub fn encode<T: Scalar>(tensor: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(tensor.rank()).map_err(|_| format_err("rank", "rank exceeds 255"))?;
    let width = std::mem::size_of::<T>();
    let mut out = Vec::with_capacity(HEADER + 4 * tensor.rank() + width * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE as u8, rank, 0]);
    for &e in tensor.shape() {
        let e = u32::try_from(e).map_err(|_| format_err("extents", format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < HEADER {
        return Err(format_err("header", format!("{} bytes, need {HEADER}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("magic", format!("{:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(format_err("version", format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(format_err("dtype", format!("unknown dtype byte {other}"))),
    };
    if dtype != T::DTYPE {
        return Err(format_err("dtype", format!("file holds {dtype:?}, expected {:?}", T::DTYPE)));
    }
    let rank = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(format_err("reserved", format!("expected 0, found {}", bytes[7])));
    }
    let extents_end = HEADER + 4 * rank;
    if bytes.len() < extents_end {
        return Err(format_err("extents", "truncated extent list"));
    }
    let shape: Vec<usize> = bytes[HEADER..extents_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let width = std::mem::size_of::<T>();
    let payload_len = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| format_err("extents", format!("element count of {shape:?} overflows")))?;
    let payload = &bytes[extents_end..];
    if payload.len() != payload_len {
        return Err(format_err(
            "payload",
            format!("expected {payload_len} bytes, found {}", payload.len()),
        ));
    }
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(&shape, data).map_err(|e| format_err("extents", e.to_string()))
}

pub fn write_tensor<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let bytes = encode(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..8], b"LTSR\x01\x00\x02\x00");
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[16..], &[0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0]);
    }

    #[test]
    fn corruption_names_the_field() {
        let t = Tensor::<f64>::ones(&[3]);
        let good = encode(&t).unwrap();
        let field = |b: &[u8]| match decode::<f64>(b) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut b = good.clone();
        b[0] = b'X';
        assert_eq!(field(&b), "magic");
        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(field(&b), "version");
        let mut b = good.clone();
        b[5] = 7;
        assert_eq!(field(&b), "dtype");
        assert_eq!(field(&encode(&Tensor::<f32>::ones(&[3])).unwrap()), "dtype");
        let mut b = good.clone();
        b[7] = 1;
        assert_eq!(field(&b), "reserved");
        assert_eq!(field(&good[..good.len() - 1]), "payload");
        assert_eq!(field(&good[..10]), "extents");
        assert_eq!(field(&good[..5]), "header");
        let mut b = good.clone();
        b[6] = 4;
        b.truncate(8);
        b.extend_from_slice(&[0xff; 16]);
        assert_eq!(field(&b), "extents");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ltsr");
        let t = Tensor::<f32>::from_f64(&[2, 3], &[0.5, -1.0, 3.25, f64::MIN_POSITIVE, 0.0, 7.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor::<f32>(&path).unwrap(), t);
        assert_eq!(read_tensor::<f32>(&dir.path().join("missing")).unwrap_err().kind(), "io");
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let bits: Vec<f64> = (0..n as u64).map(|i| f64::from_bits(seed.wrapping_mul(i + 1) & 0x7fef_ffff_ffff_ffff)).collect();
            let t = Tensor::<f64>::new(&shape, bits).unwrap();
            let back = decode::<f64>(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
