//! Little-endian framing shared by checkpoints and datasets.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};

/// First eight bytes of the SHA-256 digest, read little-endian.
pub fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        vs.iter().for_each(|&v| self.f64(v));
    }

    /// Appends the checksum of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let sum = checksum(&self.buf);
        self.u64(sum);
        self.buf
    }
}

pub struct Reader<'a> {
    path: &'a Path,
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Splits off and verifies the trailing checksum.
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(format_err(path, "file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("eight bytes"));
        let computed = checksum(body);
        if stored != computed {
            return Err(CliError::Checksum { path: path.to_path_buf(), stored, computed });
        }
        Ok(Self { path, body, pos: 0 })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.body.len() - self.pos < n {
            return Err(self.error("unexpected end of data"));
        }
        let out = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.error("array length overflow"))?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect())
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len())? != magic {
            return Err(self.error("bad magic"));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(self.error("trailing bytes"));
        }
        Ok(())
    }

    pub fn error(&self, msg: &str) -> CliError {
        format_err(self.path, msg)
    }
}

pub fn format_err(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Format { path: path.to_path_buf(), msg: msg.into() }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}
