//! 8-bit PNG for inspection and raw planar `f32` for lossless hand-off.
//!
//! Raw layout: magic `LFRAWF32`, then `width`, `height`, `channels` as
//! little-endian `u32`, then `channels` planes of `width·height` `f32` values.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use loopfill_core::render::{Image, MaskImage};

use crate::error::{IoContext, PipelineError, Result};

pub const RAW_MAGIC: &[u8; 8] = b"LFRAWF32";
pub const RAW_HEADER_BYTES: usize = 8 + 12;

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png_bytes(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| PipelineError::format(path, e.to_string()))?;
    w.write_image_data(data).map_err(|e| PipelineError::format(path, e.to_string()))?;
    w.finish().map_err(|e| PipelineError::format(path, e.to_string()))
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let data: Vec<u8> = img.pixels.iter().map(|v| quantize(*v)).collect();
    write_png_bytes(path, img.width, img.height, png::ColorType::Rgb, &data)
}

/// Masks are written as grayscale `{0, 255}`.
pub fn write_mask_png(mask: &MaskImage, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.values.iter().map(|v| if *v != 0.0 { 255 } else { 0 }).collect();
    write_png_bytes(path, mask.width, mask.height, png::ColorType::Grayscale, &data)
}

fn read_png_bytes(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).at(path)?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| PipelineError::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| PipelineError::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.width as usize, info.height as usize, channels, buf))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let (w, h, c, buf) = read_png_bytes(path)?;
    let pixels: Vec<f32> = match c {
        3 => buf.iter().map(|v| *v as f32 / 255.0).collect(),
        4 => buf.chunks_exact(4).flat_map(|p| p[..3].iter().map(|v| *v as f32 / 255.0)).collect(),
        1 => buf.iter().flat_map(|v| [*v as f32 / 255.0; 3]).collect(),
        _ => return Err(PipelineError::format(path, format!("unsupported channel count {c}"))),
    };
    Ok(Image::from_pixels(w, h, pixels)?)
}

pub fn read_mask_png(path: &Path) -> Result<MaskImage> {
    let (w, h, c, buf) = read_png_bytes(path)?;
    let values = buf.chunks_exact(c).map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(MaskImage::from_values(w, h, values)?)
}

pub fn encode_raw(width: usize, height: usize, channels: usize, interleaved: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_BYTES + interleaved.len() * 4);
    out.extend_from_slice(RAW_MAGIC);
    for v in [width, height, channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for c in 0..channels {
        for p in 0..width * height {
            out.extend_from_slice(&interleaved[p * channels + c].to_le_bytes());
        }
    }
    out
}

/// Returns `(width, height, channels, interleaved values)`.
pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    if bytes.len() < RAW_HEADER_BYTES || &bytes[..8] != RAW_MAGIC {
        return Err(PipelineError::format(path, "not a raw f32 image"));
    }
    let u = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (w, h, c) = (u(8), u(12), u(16));
    let n = w * h * c;
    if bytes.len() != RAW_HEADER_BYTES + n * 4 {
        return Err(PipelineError::format(path, format!("expected {} bytes, found {}", RAW_HEADER_BYTES + n * 4, bytes.len())));
    }
    let plane = &bytes[RAW_HEADER_BYTES..];
    let mut out = vec![0.0; n];
    for ch in 0..c {
        for p in 0..w * h {
            let o = (ch * w * h + p) * 4;
            out[p * c + ch] = f32::from_le_bytes([plane[o], plane[o + 1], plane[o + 2], plane[o + 3]]);
        }
    }
    Ok((w, h, c, out))
}

pub fn write_raw(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_raw(img.width, img.height, 3, &img.pixels)).at(path)
}

pub fn read_raw(path: &Path) -> Result<Image> {
    let (w, h, c, values) = decode_raw(&fs::read(path).at(path)?, path)?;
    if c != 3 {
        return Err(PipelineError::format(path, format!("expected 3 channels, found {c}")));
    }
    Ok(Image::from_pixels(w, h, values)?)
}

pub fn write_mask_raw(mask: &MaskImage, path: &Path) -> Result<()> {
    fs::write(path, encode_raw(mask.width, mask.height, 1, &mask.values)).at(path)
}

pub fn read_mask_raw(path: &Path) -> Result<MaskImage> {
    let (w, h, c, values) = decode_raw(&fs::read(path).at(path)?, path)?;
    if c != 1 {
        return Err(PipelineError::format(path, format!("expected 1 channel, found {c}")));
    }
    Ok(MaskImage::from_values(w, h, values)?)
}
