//! Portable Float Map: `Pf` (gray) or `PF` (RGB), rows stored bottom to
//! top, f32 samples. Written little-endian (negative scale); both byte
//! orders are read.

use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::error::{LdpError, Result};
use crate::image::Image;

pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let tag = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(LdpError::shape(format!("pfm needs 1 or 3 channels, got {c}"))),
    };
    let (h, w, c) = img.shape();
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * c * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for &v in img.pixel(y, x) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| LdpError::Data(format!("pfm: {m}"));
    // Three whitespace-separated header lines followed by one whitespace byte.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    let c = match tokens[0] {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(bad(&format!("unknown tag {t:?}"))),
    };
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale must be nonzero"));
    }
    let little = scale < 0.0;
    let need = h * w * c * 4;
    let body = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated data"))?;
    let mut data = vec![0.0; h * w * c];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, rest) = (i / (w * c), i % (w * c));
        data[(h - 1 - row) * w * c + rest] = v as f64;
    }
    Image::new(h, w, c, data)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    decode_pfm(&read_bytes(path)?)
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_pfm(img)?)
}
