//! Binary checkpoint format.
//!
//! Layout: magic `FMCK`, format version (u32 LE), then one or more parameter
//! groups. Each group is a parameter count (u32 LE) followed by records:
//! name length (u16 LE), UTF-8 name, rank (u8), extents (u32 LE each), and
//! the values as little-endian f32. EMA weights, when present, are the
//! second group.

use super::Tensor;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"FMCK";
const VERSION: u32 = 1;

/// One named set of tensors (e.g. live weights, EMA weights).
pub type ParamGroup = Vec<(String, Tensor<f32>)>;

pub fn save_checkpoint(path: &Path, groups: &[ParamGroup]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for group in groups {
        w.write_all(&(group.len() as u32).to_le_bytes())?;
        for (name, t) in group {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[t.rank() as u8])?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::TruncatedPayload)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<ParamGroup>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::TruncatedPayload)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let mut groups = Vec::new();
    loop {
        let mut count_buf = [0u8; 4];
        match r.read(&mut count_buf)? {
            0 => break,
            4 => {}
            n => {
                let mut rest = vec![0u8; 4 - n];
                r.read_exact(&mut rest).map_err(|_| Error::TruncatedPayload)?;
                count_buf[n..].copy_from_slice(&rest);
            }
        }
        let count = u32::from_le_bytes(count_buf);
        let mut group = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut nlen = [0u8; 2];
            read_exact(&mut r, &mut nlen)?;
            let mut name = vec![0u8; u16::from_le_bytes(nlen) as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::InvalidArgument("checkpoint name not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut fb = [0u8; 4];
            for _ in 0..n {
                read_exact(&mut r, &mut fb)?;
                data.push(f32::from_le_bytes(fb));
            }
            group.push((name, Tensor::from_vec(shape, data)?));
        }
        groups.push(group);
    }
    Ok(groups)
}
