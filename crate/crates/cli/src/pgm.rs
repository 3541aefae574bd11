//! 8-bit grayscale portable graymap import/export. Pixel values map to [0, 1].

use std::path::Path;

use pnpttt_core::image::RealImage;

use crate::binio::{format_err, read_file, write_file};
use crate::error::Result;

/// Binary (P5) encoding; values are clipped to [0, 1] and rounded.
pub fn encode(img: &RealImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn save(path: &Path, img: &RealImage) -> Result<()> {
    write_file(path, &encode(img))
}

/// Header tokens split on whitespace with `#` comments removed; returns the
/// tokens and the offset just past the single whitespace byte after the last.
fn header_tokens(bytes: &[u8], wanted: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < wanted {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Some((tokens, i + 1))
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<RealImage> {
    let bad = |msg: &str| format_err(path, msg);
    let (head, offset) = header_tokens(bytes, 4).ok_or_else(|| bad("truncated PGM header"))?;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid PGM header field"));
    let (w, h, maxval) = (num(&head[1])?, num(&head[2])?, num(&head[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("PGM maxval out of range"));
    }
    let scale = maxval as f64;
    let data: Vec<f64> = match head[0].as_str() {
        "P5" => {
            let wide = maxval > 255;
            let need = w * h * if wide { 2 } else { 1 };
            let body = bytes.get(offset..offset + need).ok_or_else(|| bad("truncated PGM data"))?;
            if wide {
                body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale).collect()
            } else {
                body.iter().map(|&b| b as f64 / scale).collect()
            }
        }
        "P2" => {
            let text = String::from_utf8_lossy(bytes.get(offset.min(bytes.len())..).unwrap_or(&[]));
            let values = text
                .split_whitespace()
                .take(w * h)
                .map(|t| t.parse::<f64>().map(|v| v / scale).map_err(|_| bad("invalid PGM sample")))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != w * h {
                return Err(bad("truncated PGM data"));
            }
            values
        }
        _ => return Err(bad("not a P2/P5 graymap")),
    };
    Ok(RealImage::from_vec(h, w, data)?)
}

pub fn load(path: &Path) -> Result<RealImage> {
    decode(path, &read_file(path)?)
}
