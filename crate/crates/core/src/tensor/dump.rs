//! CVT1 raw tensor dumps.
//!
//! Layout: magic `"CVT1"`, u8 dtype tag (0 = f32, 1 = f64), u8 rank, `rank`
//! u32 extents, then the row-major payload. All integers and scalars are
//! little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CVT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes one tensor from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let need = |n: usize, what: &str| -> Result<()> {
        if bytes.len() < n {
            Err(Error::Format(format!(
                "CVT1 truncated at offset {}: missing {what}",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(6, "header")?;
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad CVT1 magic {:?}", &bytes[..4])));
    }
    let dtype = DType::from_tag(bytes[4])
        .ok_or_else(|| Error::Format(format!("unknown CVT1 dtype tag {}", bytes[4])))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("CVT1 holds {dtype:?}, expected {:?}", T::DTYPE)));
    }
    let rank = bytes[5] as usize;
    need(6 + 4 * rank, "extents")?;
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    let numel: usize = shape.iter().product();
    let start = 6 + 4 * rank;
    let size = dtype.size();
    need(start + numel * size, "payload")?;
    let data = (0..numel)
        .map(|i| T::read_le(&bytes[start + i * size..start + (i + 1) * size]))
        .collect();
    Ok((Tensor::new(shape, data)?, start + numel * size))
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after CVT1 tensor", bytes.len() - used)));
    }
    Ok(t)
}

/// A complex tensor travels as one CVT1 tensor with a leading extent of 2
/// (real plane first).
pub fn encode_complex<T: Scalar>(z: &ComplexTensor<T>) -> Vec<u8> {
    let mut shape = vec![2];
    shape.extend_from_slice(z.shape());
    let mut data = Vec::with_capacity(2 * z.len());
    data.extend_from_slice(z.re().data());
    data.extend_from_slice(z.im().data());
    encode(&Tensor::new(shape, data).expect("stacked planes"))
}

pub fn decode_complex<T: Scalar>(bytes: &[u8]) -> Result<ComplexTensor<T>> {
    let (t, used) = decode::<T>(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format("trailing bytes after complex CVT1 tensor".into()));
    }
    if t.shape().first() != Some(&2) {
        return Err(Error::Format(format!("complex CVT1 needs leading extent 2, got {:?}", t.shape())));
    }
    let shape = t.shape()[1..].to_vec();
    let mut data = t.into_data();
    let im = data.split_off(data.len() / 2);
    ComplexTensor::new(Tensor::new(shape.clone(), data)?, Tensor::new(shape, im)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"CVT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn dtype_mismatch_and_truncation_rejected() {
        let b = encode(&Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap());
        assert!(decode::<f32>(&b).is_err());
        assert!(decode::<f64>(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let mut rng = crate::rng::Rng::new(seed);
            let t: Tensor<f64> = rng.sample_gaussian(&shape);
            let (back, used) = decode::<f64>(&encode(&t)).unwrap();
            prop_assert_eq!(used, encode(&t).len());
            prop_assert_eq!(back, t.clone());
            let z = ComplexTensor::new(t.clone(), t.scale(-0.5)).unwrap();
            prop_assert_eq!(decode_complex::<f64>(&encode_complex(&z)).unwrap(), z);
        }
    }
}
