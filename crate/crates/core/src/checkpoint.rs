//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CADG1"
//! u32              parameter count
//! per parameter:
//!   u32            name length in bytes
//!   [u8]           UTF-8 name
//!   u32            rank
//!   u64 × rank     extents
//!   f64 × product  values, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CadgError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CADG1";

pub fn write_checkpoint<W: Write>(params: &ParamSet, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        write_tensor(&p.value, &mut out)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ParamSet> {
    expect_magic(&mut input, CHECKPOINT_MAGIC)?;
    let count = read_u32(&mut input)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        read_exact(&mut input, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CadgError::Format("parameter name is not UTF-8".into()))?;
        let value = read_tensor(&mut input)?;
        params.add(name, value);
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(CadgError::Format("trailing bytes after checkpoint".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let bytes = fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

pub(crate) fn write_tensor<W: Write>(t: &Tensor, out: &mut W) -> Result<()> {
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        out.write_all(&(e as u64).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let rank = read_u32(input)? as usize;
    if rank > 8 {
        return Err(CadgError::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(input)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| CadgError::Format(format!("implausible tensor shape {shape:?}")))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(read_f64(input)?);
    }
    Tensor::new(shape, data).map_err(|e| CadgError::Format(e.to_string()))
}

pub(crate) fn expect_magic<R: Read>(input: &mut R, magic: &[u8]) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    read_exact(input, &mut buf)?;
    if buf != magic {
        return Err(CadgError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CadgError::Format("truncated file".into()),
        _ => CadgError::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        ps.add("embed.w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        ps.add("cls", Tensor::randn(&[4], 1.0, &mut rng));
        ps.add("scalar", Tensor::scalar(-0.0));
        ps.add("special", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, f64::MAX]).unwrap());
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ps = sample();
        let mut buf = Vec::new();
        write_checkpoint(&ps, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        for (a, b) in ps.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_checkpoint(&sample(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[4] = b'2';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(CadgError::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(short), Err(CadgError::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_checkpoint(long.as_slice()), Err(CadgError::Format(_))));
    }
}
