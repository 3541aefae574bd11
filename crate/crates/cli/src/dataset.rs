//! Image dataset container: magic `PNPTTTDS`, version `u32`, image count
//! `u64`, height and width `u32`, then the images row-major as little-endian
//! `f64`, then an 8-byte checksum.

use std::path::Path;

use pnpttt_core::image::RealImage;

use crate::binio::{format_err, read_file, write_file, Reader, Writer};
use crate::error::Result;

pub const MAGIC: &[u8; 8] = b"PNPTTTDS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

/// Container size in bytes for `count` images of `height x width`.
pub fn file_size(count: usize, height: usize, width: usize) -> usize {
    HEADER_LEN + count * height * width * 8 + 8
}

/// Encodes images that share one shape; an empty set stores `shape` in the header.
pub fn encode(images: &[RealImage], shape: (usize, usize)) -> Result<Vec<u8>> {
    let here = Path::new("<dataset>");
    let (h, w) = images.first().map_or(shape, RealImage::shape);
    if images.iter().any(|im| im.shape() != (h, w)) {
        return Err(format_err(here, "images differ in shape"));
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| format_err(here, "image dimension does not fit in u32"));
    let mut out = Writer::new();
    out.bytes(MAGIC);
    out.u32(VERSION);
    out.u64(images.len() as u64);
    out.u32(dim(h)?);
    out.u32(dim(w)?);
    for im in images {
        out.f64s(im.data());
    }
    Ok(out.finish())
}

/// Images and the `(height, width)` recorded in the header.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<(Vec<RealImage>, (usize, usize))> {
    let mut r = Reader::new(path, bytes)?;
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error(&format!("unsupported dataset version {version}")));
    }
    let count = usize::try_from(r.u64()?).map_err(|_| r.error("image count too large"))?;
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    let expected = count
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(HEADER_LEN + 8));
    if expected != Some(bytes.len()) {
        return Err(r.error("size does not match header"));
    }
    let images = (0..count)
        .map(|_| {
            let data = r.f64s(h * w)?;
            RealImage::from_vec(h, w, data).map_err(Into::into)
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((images, (h, w)))
}

pub fn save(path: &Path, images: &[RealImage], shape: (usize, usize)) -> Result<()> {
    write_file(path, &encode(images, shape)?)
}

pub fn load(path: &Path) -> Result<Vec<RealImage>> {
    Ok(decode(path, &read_file(path)?)?.0)
}
