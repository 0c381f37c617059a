//! The VOX1 tensor dump written by `voxelize`.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VOX1"
//! 4       4     channels (u32, always 2)
//! 8       4     bins (u32)
//! 12      4     height (u32)
//! 16      4     width (u32)
//! 20      8     t1 (i64, us)
//! 28      8     t2 (i64, us)
//! 36      4*n   counts (u32), index ((c * bins + b) * height + y) * width + x
//! ```

use std::path::Path;

use super::{EventTensor, VoxelSpec, Window};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VOX1";
pub const HEADER_LEN: usize = 36;

pub fn encode(t: &EventTensor) -> Vec<u8> {
    let s = t.spec();
    let w = t.window();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t.data().len());
    buf.extend_from_slice(MAGIC);
    for v in [2, s.bins, s.height, s.width] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&w.t1.to_le_bytes());
    buf.extend_from_slice(&w.t2.to_le_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<EventTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::data(format!("VOX1 header truncated: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::data("bad magic, expected \"VOX1\""));
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let i = |o: usize| i64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u(4) != 2 {
        return Err(Error::data(format!("VOX1 channels = {}, expected 2", u(4))));
    }
    let spec = VoxelSpec::new(u(8), u(12), u(16)).map_err(|e| Error::data(e.to_string()))?;
    let window = Window::new(i(20), i(28)).map_err(|e| Error::data(e.to_string()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * spec.numel() {
        return Err(Error::data(format!(
            "VOX1 body has {} bytes, shape needs {}",
            body.len(),
            4 * spec.numel()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    EventTensor::from_raw(spec, window, data)
}

pub fn read_file(path: &Path) -> Result<EventTensor> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_file(path: &Path, t: &EventTensor) -> Result<()> {
    crate::io::write_atomic(path, &encode(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let spec = VoxelSpec::new(3, 2, 4).unwrap();
        let data: Vec<u32> = (0..spec.numel() as u32).map(|v| v * 7).collect();
        let t = EventTensor::from_raw(spec, Window::new(-5, 10).unwrap(), data).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes.len(), HEADER_LEN + 4 * 48);
        assert_eq!(decode(&bytes).unwrap(), t);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"VOX2").is_err());
    }
}
