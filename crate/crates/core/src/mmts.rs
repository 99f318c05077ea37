//! MMTS: the little-endian binary container for time series.
//!
//! ```text
//! "MMTS" | version u16 = 1 | channels u32 | sample_rate f64 | samples u64 | f32 payload, channel-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::series::TimeSeries;

pub const MAGIC: &[u8; 4] = b"MMTS";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8 + 8;

pub fn encode(ts: &TimeSeries) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + ts.data().len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ts.channels() as u32).to_le_bytes());
    buf.extend_from_slice(&ts.sample_rate_hz().to_le_bytes());
    buf.extend_from_slice(&(ts.samples() as u64).to_le_bytes());
    for &v in ts.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<TimeSeries> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("MMTS header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad MMTS magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported MMTS version {version}")));
    }
    let channels = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let rate = f64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let samples = u64::from_le_bytes(bytes[18..26].try_into().unwrap()) as usize;
    let expected = channels
        .checked_mul(samples)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("MMTS dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "MMTS payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    TimeSeries::new(channels, rate, data)
}

pub fn write(path: impl AsRef<Path>, ts: &TimeSeries) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(ts))?;
    w.flush()?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?)
    .read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
