//! Binary dataset container and CSV session import.
//!
//! Container layout: magic "EMGW", version u32, N,C,L,K u32, split tag u8,
//! subject id (u16 length + UTF-8), windows as little-endian f32 row-major
//! [N,C,L], labels u16[N], trial ids u16[N].

use super::{RecordingSession, Split, WindowDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"EMGW";
const VERSION: u32 = 1;

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TruncatedPayload
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub fn dataset_save(ds: &WindowDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [
        ds.len() as u32,
        ds.channels() as u32,
        ds.window_len() as u32,
        ds.num_classes as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[ds.split.tag()])?;
    let sid = ds.subject_id.as_bytes();
    w.write_all(&(sid.len() as u16).to_le_bytes())?;
    w.write_all(sid)?;
    for &v in ds.windows.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in &ds.labels {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in &ds.trial_ids {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn dataset_load(path: &Path) -> Result<WindowDataset> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
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
    let n = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let l = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as u16;
    let mut tag = [0u8; 1];
    read_exact(&mut r, &mut tag)?;
    let split = Split::from_tag(tag[0])?;
    let sid_len = read_u16(&mut r)? as usize;
    let mut sid = vec![0u8; sid_len];
    read_exact(&mut r, &mut sid)?;
    let subject_id = String::from_utf8(sid)
        .map_err(|_| Error::InvalidArgument("subject id is not UTF-8".into()))?;
    let mut data = vec![0f32; n * c * l];
    for v in &mut data {
        let mut b = [0u8; 4];
        read_exact(&mut r, &mut b)?;
        *v = f32::from_le_bytes(b);
    }
    let mut labels = vec![0u16; n];
    for v in &mut labels {
        *v = read_u16(&mut r)?;
    }
    let mut trial_ids = vec![0u16; n];
    for v in &mut trial_ids {
        *v = read_u16(&mut r)?;
    }
    let ds = WindowDataset {
        windows: Tensor::from_vec(vec![n, c, l], data)?,
        labels,
        subject_id,
        split,
        trial_ids,
        num_classes: k,
    };
    ds.validate()?;
    Ok(ds)
}

/// Import a raw session from CSV with header `t,ch0..chC-1,label,trial`.
/// The sampling rate is inferred from the time column, which must be
/// uniformly spaced.
pub fn session_from_csv(path: &Path, subject_id: &str) -> Result<RecordingSession> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or(Error::TruncatedPayload)?
        .map_err(Error::Io)?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 4 || cols[0] != "t" || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "trial" {
        return Err(Error::InvalidArgument(format!(
            "expected CSV header t,ch0..chC-1,label,trial, got '{}'",
            header.trim()
        )));
    }
    let c = cols.len() - 3;
    for (i, name) in cols[1..1 + c].iter().enumerate() {
        if *name != format!("ch{}", i) {
            return Err(Error::InvalidArgument(format!(
                "channel column {} named '{}', expected 'ch{}'",
                i + 1,
                name,
                i
            )));
        }
    }
    let mut times = Vec::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut labels = Vec::new();
    let mut trials = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::InvalidArgument(format!(
                "row {}: {} fields, expected {}",
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        let parse_err = |what: &str| {
            Error::InvalidArgument(format!("row {}: bad {} value", lineno + 2, what))
        };
        times.push(fields[0].parse::<f64>().map_err(|_| parse_err("t"))?);
        let mut row = Vec::with_capacity(c);
        for f in &fields[1..1 + c] {
            row.push(f.parse::<f32>().map_err(|_| parse_err("channel"))?);
        }
        rows.push(row);
        labels.push(fields[1 + c].parse::<u16>().map_err(|_| parse_err("label"))?);
        trials.push(fields[2 + c].parse::<u16>().map_err(|_| parse_err("trial"))?);
    }
    if times.len() < 2 {
        return Err(Error::InvalidArgument(
            "CSV session needs at least two samples".into(),
        ));
    }
    let dt = times[1] - times[0];
    if dt <= 0.0 {
        return Err(Error::InvalidArgument("time column must increase".into()));
    }
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt.max(1.0) {
            return Err(Error::InvalidArgument(
                "time column is not uniformly spaced".into(),
            ));
        }
    }
    let t = rows.len();
    let mut signal = vec![0f32; c * t];
    for (i, row) in rows.iter().enumerate() {
        for (ch, &v) in row.iter().enumerate() {
            signal[ch * t + i] = v;
        }
    }
    let session = RecordingSession {
        subject_id: subject_id.to_string(),
        sampling_rate: 1.0 / dt,
        signal: Tensor::from_vec(vec![c, t], signal)?,
        labels,
        trials,
    };
    session.validate()?;
    Ok(session)
}
