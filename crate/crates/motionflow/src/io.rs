//! PNG rasters, the MFLO flow format and JSON documents.
//!
//! Frames are 8-bit grayscale or RGB PNGs. Masks are 8-bit single-channel
//! PNGs whose pixel values are class ids. A flow file is
//!
//! ```text
//! "MFLO"  u32 version = 1  u32 width  u32 height  (f32 u, f32 v) * width * height
//! ```
//!
//! with every number little-endian and the vectors in row-major order.

use std::fs;
use std::path::Path;

use image::{ColorType, DynamicImage, ExtendedColorType, ImageFormat};
use motionflow_core::{FlowField, Frame, LabelMask};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const FLOW_MAGIC: [u8; 4] = *b"MFLO";
pub const FLOW_VERSION: u32 = 1;
const FLOW_HEADER: usize = 16;

fn open_png(path: &Path) -> CliResult<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|source| CliError::Image { path: path.to_path_buf(), source })
}

fn save_png(path: &Path, bytes: &[u8], width: usize, height: usize, color: ExtendedColorType) -> CliResult<()> {
    image::save_buffer_with_format(path, bytes, width as u32, height as u32, color, ImageFormat::Png)
        .map_err(|source| CliError::Image { path: path.to_path_buf(), source })
}

/// Reads a grayscale PNG as one channel and anything with colour as RGB.
pub fn read_frame(path: &Path) -> CliResult<Frame> {
    let img = open_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let frame = if img.color().has_color() {
        Frame::from_u8(h, w, 3, img.to_rgb8().as_raw())
    } else {
        Frame::from_u8(h, w, 1, img.to_luma8().as_raw())
    };
    Ok(frame?)
}

pub fn write_frame(path: &Path, frame: &Frame) -> CliResult<()> {
    let color = match frame.channels() {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        c => return Err(CliError::input(format!("cannot store a {c}-channel frame as PNG"))),
    };
    save_png(path, &frame.to_u8(), frame.width(), frame.height(), color)
}

pub fn read_mask(path: &Path) -> CliResult<LabelMask> {
    let img = open_png(path)?;
    if img.color() != ColorType::L8 {
        return Err(CliError::input(format!("{}: masks must be 8-bit single-channel PNGs", path.display())));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(LabelMask::new(h, w, img.into_luma8().into_raw())?)
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> CliResult<()> {
    save_png(path, mask.ids(), mask.width(), mask.height(), ExtendedColorType::L8)
}

/// Serializes a flow; components are narrowed to `f32`.
pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(FLOW_HEADER + 8 * flow.u().len());
    out.extend_from_slice(&FLOW_MAGIC);
    out.extend_from_slice(&FLOW_VERSION.to_le_bytes());
    out.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FlowFormatError {
    #[error("not an MFLO file")]
    BadMagic,
    #[error("unsupported MFLO version {0}")]
    Version(u32),
    #[error("MFLO payload holds {actual} bytes, header implies {expected}")]
    Length { expected: usize, actual: usize },
    #[error("MFLO file has a zero dimension")]
    Empty,
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn le_f32(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField, FlowFormatError> {
    if bytes.len() < FLOW_HEADER || bytes[..4] != FLOW_MAGIC {
        return Err(FlowFormatError::BadMagic);
    }
    let version = le_u32(bytes, 4);
    if version != FLOW_VERSION {
        return Err(FlowFormatError::Version(version));
    }
    let w = le_u32(bytes, 8) as usize;
    let h = le_u32(bytes, 12) as usize;
    if w == 0 || h == 0 {
        return Err(FlowFormatError::Empty);
    }
    let expected = FLOW_HEADER + 8 * w * h;
    if bytes.len() != expected {
        return Err(FlowFormatError::Length { expected, actual: bytes.len() });
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for p in 0..w * h {
        let at = FLOW_HEADER + 8 * p;
        u.push(f64::from(le_f32(bytes, at)));
        v.push(f64::from(le_f32(bytes, at + 4)));
    }
    Ok(FlowField::new(h, w, u, v).expect("lengths match the header"))
}

pub fn write_flow(path: &Path, flow: &FlowField) -> CliResult<()> {
    fs::write(path, encode_flow(flow)).map_err(|e| CliError::io(path, e))
}

pub fn read_flow(path: &Path) -> CliResult<FlowField> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_flow(&bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
