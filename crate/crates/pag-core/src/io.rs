//! File formats: the PTSR binary tensor container plus P5/P6 image writers.
//!
//! PTSR layout: magic "PTSR", one u8 version (=1), one u8 rank, then rank
//! little-endian u32 extents, then row-major little-endian IEEE-754 f64
//! values. Used for fixtures and checkpoints by every module.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PTSR_MAGIC: [u8; 4] = *b"PTSR";
pub const PTSR_VERSION: u8 = 1;

pub fn ptsr_bytes(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} exceeds u8", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(&PTSR_MAGIC);
    out.push(PTSR_VERSION);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn tensor_from_ptsr_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 {
        return Err(Error::Format("ptsr payload shorter than header".into()));
    }
    if bytes[0..4] != PTSR_MAGIC {
        return Err(Error::Format("bad ptsr magic".into()));
    }
    if bytes[4] != PTSR_VERSION {
        return Err(Error::Format(format!("unsupported ptsr version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let dims_end = 6 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format("ptsr payload truncated in extents".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for r in 0..rank {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[6 + 4 * r..10 + 4 * r]);
        dims.push(u32::from_le_bytes(buf) as usize);
    }
    let count: usize = dims.iter().product();
    if bytes.len() != dims_end + 8 * count {
        return Err(Error::Format(format!(
            "ptsr payload has {} data bytes, expected {}",
            bytes.len() - dims_end,
            8 * count
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[dims_end + 8 * i..dims_end + 8 * i + 8]);
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(dims, data)
}

pub fn write_ptsr(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, ptsr_bytes(t)?)?;
    Ok(())
}

pub fn read_ptsr(path: &Path) -> Result<Tensor> {
    tensor_from_ptsr_bytes(&fs::read(path)?)
}

/// 8-bit binary PGM ("P5").
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Format(format!(
            "pgm expects {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// 8-bit binary PPM ("P6"), interleaved RGB.
pub fn ppm_bytes(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Format(format!(
            "ppm expects {} bytes, got {}",
            3 * width * height,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn golden_header_bytes() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = ptsr_bytes(&t).unwrap();
        assert_eq!(&bytes[0..4], b"PTSR");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..22], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[22..30], &(-2.0f64).to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
        let mut bytes = ptsr_bytes(&t).unwrap();
        bytes[0] = b'X';
        assert!(tensor_from_ptsr_bytes(&bytes).is_err());
        let bytes = ptsr_bytes(&t).unwrap();
        assert!(tensor_from_ptsr_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ptsr");
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i as f64) * 0.125 - 1.0).unwrap();
        write_ptsr(&path, &t).unwrap();
        assert_eq!(read_ptsr(&path).unwrap(), t);
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_tensor(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut state = seed;
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
                })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = tensor_from_ptsr_bytes(&ptsr_bytes(&t).unwrap()).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
