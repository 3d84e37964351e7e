//! Little-endian binary tensor format.
//!
//! Layout: magic `DMLT`, version `u32`, ndim `u32`, `ndim` dims as `u64`,
//! then the `f64` payload in row-major order.

use std::io::{Read, Write};

use super::{numel, Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"DMLT";
pub const VERSION: u32 = 1;

/// Bytes occupied by `t` in this format.
pub fn encoded_len(t: &Tensor) -> usize {
    4 + 4 + 4 + 8 * t.ndim() + 8 * t.numel()
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(8 * t.numel());
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(TensorError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let ndim = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let d = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| TensorError::Format("dimension overflows usize".into()))?;
        shape.push(d);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::Format("element count overflows".into()))?;
    debug_assert_eq!(n, numel(&shape));
    let mut payload = vec![0u8; 8 * n];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2, 1], vec![1.5, -2.0]).unwrap();
        let b = to_bytes(&t);
        assert_eq!(&b[..4], b"DMLT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[28..36].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), encoded_len(&t));
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut b = to_bytes(&Tensor::scalar(1.0));
        b[0] = b'X';
        assert!(from_bytes(&b).is_err());
        let b = to_bytes(&Tensor::zeros([3]));
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trips(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed as f64) * 1e-9 + i as f64).sin()).collect();
            let t = Tensor::new(shape, data).unwrap();
            prop_assert_eq!(from_bytes(&to_bytes(&t)).unwrap(), t);
        }
    }
}
