//! Little-endian binary helpers shared by the sample, cache and model formats.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Length-prefixed (u16) UTF-8 string.
pub(crate) fn put_str(buf: &mut Vec<u8>, text: &str) -> Result<()> {
    let len = u16::try_from(text.len()).map_err(|_| {
        Error::InvalidArgument(format!("identifier too long: {} bytes", text.len()))
    })?;
    put_u16(buf, len);
    buf.extend_from_slice(text.as_bytes());
    Ok(())
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub(crate) fn header_err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.header_err(format!("header ends early at byte {}", self.bytes.len())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.header_err("identifier is not utf-8"))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4], version: u16) -> Result<()> {
        let m = self.take(4)?;
        if m != expected {
            return Err(self.header_err(format!("bad magic {:?}, expected {:?}", m, expected)));
        }
        let v = self.u16()?;
        if v != version {
            return Err(Error::Version {
                path: self.path.clone(),
                found: v,
                supported: version,
            });
        }
        Ok(())
    }

    /// Reads `n` little-endian floats, reporting truncation separately from header damage.
    pub(crate) fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let need = n * 4;
        let have = self.bytes.len() - self.pos;
        if have < need {
            return Err(Error::Truncated {
                path: self.path.clone(),
                expected: self.pos + need,
                found: self.bytes.len(),
            });
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += need;
        Ok(out)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.header_err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
