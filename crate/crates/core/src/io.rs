//! Binary tensor files.
//!
//! Layout: an ASCII header line `TNSRv1 f64 <d> <p_1> ... <p_d>\n`, then the
//! entries as little-endian binary64 in mode-1 vectorization order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

const MAGIC: &str = "TNSRv1";

pub fn write_tensor_to<W: Write>(mut w: W, t: &DenseTensor) -> Result<()> {
    let mut header = format!("{MAGIC} f64 {}", t.order());
    for p in t.dims() {
        header.push_str(&format!(" {p}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(t.len() * 8);
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_from<R: Read>(r: R) -> Result<DenseTensor> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("missing header terminator".into()));
    }
    line.pop();
    let header = std::str::from_utf8(&line)
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let mut fields = header.split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(Error::Format(format!("bad magic in header {header:?}")));
    }
    match fields.next() {
        Some("f64") => {}
        other => return Err(Error::Format(format!("unsupported element type {other:?}"))),
    }
    let parse = |s: Option<&str>| -> Result<usize> {
        s.and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad header {header:?}")))
    };
    let d = parse(fields.next())?;
    let dims = (0..d).map(|_| parse(fields.next())).collect::<Result<Vec<_>>>()?;
    if fields.next().is_some() {
        return Err(Error::Format(format!("trailing fields in header {header:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &p| acc.checked_mul(p))
        .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("expected {count} values: {e}")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after data".into()));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    DenseTensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    write_tensor_to(BufWriter::new(File::create(path)?), t)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    read_tensor_from(File::open(path)?)
}
