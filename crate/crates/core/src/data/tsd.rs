//! TSD1 binary dataset format (little-endian).
//!
//! ```text
//! "TSD1" | u32 version=1 | u64 N | u32 C | u32 T | u32 K
//! N*C*T f32 samples, (sample, channel, time) row-major
//! N i64 labels, -1 = unlabeled
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TSD_MAGIC: &[u8; 4] = b"TSD1";
pub const TSD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TsdHeader {
    pub version: u32,
    pub samples: u64,
    pub channels: u32,
    pub length: u32,
    pub num_classes: u32,
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format(format!("truncated payload while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tsd_header<R: Read>(r: &mut R) -> Result<TsdHeader> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != TSD_MAGIC {
        return Err(Error::format(format!("magic mismatch: expected \"TSD1\", found {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != TSD_VERSION {
        return Err(Error::format(format!("unsupported TSD version {version}")));
    }
    Ok(TsdHeader {
        version,
        samples: read_u64(r, "sample count")?,
        channels: read_u32(r, "channel count")?,
        length: read_u32(r, "series length")?,
        num_classes: read_u32(r, "class count")?,
    })
}

pub fn read_tsd<R: Read>(mut r: R, name: &str) -> Result<Dataset> {
    let h = read_tsd_header(&mut r)?;
    let n = usize::try_from(h.samples).map_err(|_| Error::format("sample count overflows"))?;
    let (c, t) = (h.channels as usize, h.length as usize);
    let values = n
        .checked_mul(c)
        .and_then(|x| x.checked_mul(t))
        .ok_or_else(|| Error::format("payload size overflows"))?;
    let value_bytes = values.checked_mul(4).ok_or_else(|| Error::format("payload size overflows"))?;

    // Read through `take` so a lying header cannot force a huge allocation.
    let mut buf = Vec::new();
    (&mut r).take(value_bytes as u64).read_to_end(&mut buf)?;
    if buf.len() != value_bytes {
        return Err(Error::format(format!(
            "truncated payload: expected {value_bytes} sample bytes, found {}",
            buf.len()
        )));
    }
    let data: Vec<f32> = buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();

    let mut lbuf = Vec::new();
    (&mut r).take(n as u64 * 8).read_to_end(&mut lbuf)?;
    if lbuf.len() != n * 8 {
        return Err(Error::format(format!(
            "truncated payload: expected {} label bytes, found {}",
            n * 8,
            lbuf.len()
        )));
    }
    let labels: Vec<i64> = lbuf.chunks_exact(8).map(|b| i64::from_le_bytes(b.try_into().unwrap())).collect();

    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format("trailing bytes after label block"));
    }

    let samples = Tensor::new(vec![n, c, t], data)?;
    Dataset::new(samples, labels, h.num_classes as usize, name).map_err(|e| match e {
        Error::Data(msg) | Error::Shape(msg) => Error::Format(msg),
        other => other,
    })
}

pub fn write_tsd<W: Write>(mut w: W, d: &Dataset) -> Result<()> {
    let narrow = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::format(format!("{what} exceeds u32")));
    w.write_all(TSD_MAGIC)?;
    w.write_all(&TSD_VERSION.to_le_bytes())?;
    w.write_all(&(d.len() as u64).to_le_bytes())?;
    w.write_all(&narrow(d.channels(), "channel count")?.to_le_bytes())?;
    w.write_all(&narrow(d.length(), "series length")?.to_le_bytes())?;
    w.write_all(&narrow(d.num_classes(), "class count")?.to_le_bytes())?;
    let mut buf = Vec::with_capacity(d.samples().len() * 4 + d.len() * 8);
    for v in d.samples().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for y in d.labels() {
        buf.extend_from_slice(&y.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    read_tsd(bytes.as_slice(), name)
}

pub fn save_dataset(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    write_tsd(&mut buf, d)?;
    fs::write(path, buf)?;
    Ok(())
}
