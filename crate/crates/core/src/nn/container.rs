//! Flat little-endian tensor container.
//!
//! ```text
//! magic    4 bytes  "TTNC"
//! version  u32      1
//! count    u32
//! entry*   name_len u32, name (utf-8), dtype u8 (0 = f32), rank u32,
//!          extents u64 * rank, payload f32 * prod(extents), row-major
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use super::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TTNC";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a tensor container (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype tag {0} for entry {1}")]
    UnsupportedDtype(u8, String),
    #[error("entry name is not utf-8")]
    BadName,
    #[error("entry {name} has invalid extents {extents:?}")]
    BadExtents { name: String, extents: Vec<u64> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_container<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<(), ContainerError> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, ContainerError> {
    let mut magic = [0; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| ContainerError::BadName)?;
        let mut dtype = [0];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F32 {
            return Err(ContainerError::UnsupportedDtype(dtype[0], name));
        }
        let rank = read_u32(&mut r)?;
        let extents = (0..rank).map(|_| read_u64(&mut r)).collect::<io::Result<Vec<_>>>()?;
        let numel = extents
            .iter()
            .try_fold(1u64, |acc, &e| acc.checked_mul(e))
            .filter(|&n| rank > 0 && n < (1 << 32));
        let Some(numel) = numel else {
            return Err(ContainerError::BadExtents { name, extents });
        };
        let mut data = Vec::with_capacity(numel as usize);
        let mut b = [0; 4];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        let shape = extents.iter().map(|&e| e as usize).collect();
        let t = Tensor::new_allow_empty(shape, data).map_err(|_| ContainerError::BadExtents {
            name: name.clone(),
            extents,
        })?;
        entries.push((name, t));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, &[("ab".into(), t)]).unwrap();
        let expected: Vec<u8> = [
            &b"TTNC"[..],
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            b"ab",
            &[0],
            &1u32.to_le_bytes(),
            &2u64.to_le_bytes(),
            &1.0f32.to_le_bytes(),
            &(-2.0f32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(read_container(&b"NOPE\x01\0\0\0"[..]), Err(ContainerError::BadMagic(_))));
        let mut buf = Vec::new();
        write_container(&mut buf, &[("x".into(), Tensor::zeros(&[3]))]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read_container(&buf[..]), Err(ContainerError::Io(_))));
        let mut v2 = b"TTNC".to_vec();
        v2.extend(2u32.to_le_bytes());
        assert!(matches!(read_container(&v2[..]), Err(ContainerError::UnsupportedVersion(2))));
    }

    proptest! {
        #[test]
        fn round_trip_at_f32_precision(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..4),
            seed in any::<u64>(),
        ) {
            let entries: Vec<(String, Tensor)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let t = Tensor::from_fn(s, |k| ((seed.wrapping_add(k as u64) % 1000) as f64 - 500.0) / 7.0);
                    (format!("entry.{i}"), t)
                })
                .collect();
            let mut buf = Vec::new();
            write_container(&mut buf, &entries).unwrap();
            let back = read_container(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), entries.len());
            for ((na, ta), (nb, tb)) in entries.iter().zip(&back) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                for (a, b) in ta.data().iter().zip(tb.data()) {
                    prop_assert_eq!((*a as f32) as f64, *b);
                }
            }
        }
    }
}
