//! File formats: PNG images, little-endian PFM float maps, network
//! checkpoints and the on-disk dataset layout.
//!
//! Byte-level encoders and decoders work on slices so the browser demo can
//! use them without a filesystem; the `*_file` helpers add paths.

mod checkpoint;
mod dataset;
mod pfm;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use dataset::{read_dataset, read_scene, write_manifest, write_scene, Manifest, ManifestEntry, SceneMeta, SceneRecord, MANIFEST_FILE};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};

use std::io::Cursor;
use std::path::Path;

use crate::error::{LdpError, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PngDepth {
    Eight,
    Sixteen,
}

/// Decode an 8- or 16-bit PNG to `[0,1]` floats. Gray and RGB keep their
/// channel count; alpha is dropped; palettes are expanded.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| LdpError::Data(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| LdpError::Data("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| LdpError::Data(format!("png: {e}")))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (src_c, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(LdpError::Data("png: unexpanded palette".into())),
    };
    let sixteen = info.bit_depth == png::BitDepth::Sixteen;
    let sample = |i: usize| -> f64 {
        if sixteen {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / 65535.0
        } else {
            buf[i] as f64 / 255.0
        }
    };
    let mut data = Vec::with_capacity(h * w * keep);
    for p in 0..h * w {
        for c in 0..keep {
            data.push(sample(p * src_c + c));
        }
    }
    Image::new(h, w, keep, data)
}

/// Encode a 1- or 3-channel image, clamping to `[0,1]` and rounding to the
/// nearest code. Compression and filtering are fixed so output bytes depend
/// only on the pixels.
pub fn encode_png(img: &Image, depth: PngDepth) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(LdpError::shape(format!("png needs 1 or 3 channels, got {c}"))),
    };
    if !img.is_finite() {
        return Err(LdpError::Numeric("cannot encode non-finite pixels".into()));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(color);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Paeth);
        let bytes: Vec<u8> = match depth {
            PngDepth::Eight => {
                enc.set_depth(png::BitDepth::Eight);
                img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
            }
            PngDepth::Sixteen => {
                enc.set_depth(png::BitDepth::Sixteen);
                img.data()
                    .iter()
                    .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
                    .collect()
            }
        };
        let mut writer = enc.write_header().map_err(|e| LdpError::Data(format!("png: {e}")))?;
        writer.write_image_data(&bytes).map_err(|e| LdpError::Data(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn read_png(path: &Path) -> Result<Image> {
    decode_png(&read_bytes(path)?)
}

pub fn write_png(path: &Path, img: &Image, depth: PngDepth) -> Result<()> {
    write_bytes(path, &encode_png(img, depth)?)
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LdpError::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| LdpError::io(path, e))
}

#[cfg(test)]
mod tests;
