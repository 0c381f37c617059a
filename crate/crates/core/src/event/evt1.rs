//! The EVT1 binary event file.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EVT1"
//! 4       2     sensor_w (u16)
//! 6       2     sensor_h (u16)
//! 8       4     event_count (u32)
//! 12      4     reserved (u32, written as 0)
//! 16      13*n  records: x u16, y u16, t i64 (us), p i8 (-1 / +1)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EVT1";
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 13;

pub fn encode(stream: &EventStream) -> Result<Vec<u8>> {
    let count = u32::try_from(stream.len())
        .map_err(|_| Error::arg("EVT1 files hold at most u32::MAX events"))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&stream.sensor_w().to_le_bytes());
    buf.extend_from_slice(&stream.sensor_h().to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for e in stream.events() {
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.push(e.p.sign() as u8);
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::data(format!(
            "EVT1 header truncated: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::data("bad magic, expected \"EVT1\""));
    }
    let w = u16::from_le_bytes([bytes[4], bytes[5]]);
    let h = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * RECORD_LEN {
        return Err(Error::data(format!(
            "header declares {count} events ({} bytes) but body has {} bytes",
            count * RECORD_LEN,
            body.len()
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::data("sensor dimensions must be positive"));
    }
    let mut events = Vec::with_capacity(count);
    let mut last_t = i64::MIN;
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = i64::from_le_bytes(rec[4..12].try_into().unwrap());
        let p = Polarity::from_sign(rec[12] as i8)
            .map_err(|_| Error::data(format!("record {i}: polarity byte {} is not -1/+1", rec[12] as i8)))?;
        if x >= w || y >= h {
            return Err(Error::data(format!("record {i}: pixel ({x}, {y}) outside {w}x{h}")));
        }
        if t < last_t {
            return Err(Error::data(format!(
                "record {i}: timestamp {t} precedes previous {last_t} (stream must be sorted)"
            )));
        }
        last_t = t;
        events.push(Event { x, y, t, p });
    }
    EventStream::new(w, h, events)
}

pub fn write<W: Write>(mut out: W, stream: &EventStream) -> std::io::Result<()> {
    let buf = encode(stream).map_err(std::io::Error::other)?;
    out.write_all(&buf)
}

pub fn read<R: Read>(mut input: R) -> Result<EventStream> {
    let mut buf = Vec::new();
    input
        .read_to_end(&mut buf)
        .map_err(|e| Error::io("<reader>", e))?;
    decode(&buf)
}

pub fn read_file(path: &Path) -> Result<EventStream> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_file(path: &Path, stream: &EventStream) -> Result<()> {
    crate::io::write_atomic(path, &encode(stream)?)
}
