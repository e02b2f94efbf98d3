//! `NDT1` tensor files: a text header line
//! `NDT1 <dtype> <ndim> <ext0> <ext1> ...` followed by raw little-endian
//! scalars in row-major order.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{NumericsError, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &str = "NDT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut header = format!("{MAGIC} {} {}", T::DTYPE, t.ndim());
    for d in t.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_to<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

/// Reads one record from a buffered stream, leaving it positioned after
/// the record.
pub fn read_from<T: Scalar>(r: &mut impl BufRead) -> Result<Tensor<T>> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(NumericsError::Format("unexpected end of input".into()));
    }
    let mut parts = line.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(NumericsError::Format(format!("bad magic in header {line:?}")));
    }
    let dtype = parts
        .next()
        .and_then(DType::parse)
        .ok_or_else(|| NumericsError::Format(format!("bad dtype in header {line:?}")))?;
    if dtype != T::DTYPE {
        return Err(NumericsError::DtypeMismatch {
            expected: T::DTYPE.to_string(),
            found: dtype.to_string(),
        });
    }
    let parse = |s: Option<&str>| -> Result<usize> {
        s.and_then(|s| s.parse().ok())
            .ok_or_else(|| NumericsError::Format(format!("bad extent in header {line:?}")))
    };
    let ndim = parse(parts.next())?;
    let shape = (0..ndim).map(|_| parse(parts.next())).collect::<Result<Vec<_>>>()?;
    if parts.next().is_some() {
        return Err(NumericsError::Format(format!("trailing fields in header {line:?}")));
    }
    let n: usize = shape.iter().product();
    let size = dtype.size();
    let mut buf = vec![0u8; n * size];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(&shape, data)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cur = std::io::Cursor::new(bytes);
    let t = read_from(&mut cur)?;
    if (cur.position() as usize) != bytes.len() {
        return Err(NumericsError::Format("trailing bytes after tensor".into()));
    }
    Ok(t)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_text_line() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        let bytes = encode(&t);
        assert!(bytes.starts_with(b"NDT1 f32 2 2 3\n"));
        assert_eq!(bytes.len(), 15 + 24);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let t = Tensor::<f64>::from_f64(&[3], &[1.0 / 3.0, -0.0, f64::MIN_POSITIVE]).unwrap();
        let back: Tensor<f64> = decode(&encode(&t)).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let bytes = encode(&Tensor::<f32>::zeros(&[1]));
        assert!(matches!(
            decode::<f64>(&bytes),
            Err(NumericsError::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn truncated_payload_fails() {
        let mut bytes = encode(&Tensor::<f32>::zeros(&[4]));
        bytes.pop();
        assert!(decode::<f32>(&bytes).is_err());
    }
}
