//! Dense 2-D array files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"OCTA"
//! 4       2     format version (1)
//! 6       1     modality tag (0 intensity, 1 phase, 255 untagged)
//! 7       1     dtype tag (1 = f32)
//! 8       4     rows
//! 12      4     cols
//! 16      ...   rows * cols f32 values, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tissue::Modality;

pub const MAGIC: &[u8; 4] = b"OCTA";
pub const ARRAY_FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 16;

fn modality_tag(m: Option<Modality>) -> u8 {
    match m {
        Some(Modality::Intensity) => 0,
        Some(Modality::Phase) => 1,
        None => 255,
    }
}

pub fn encode_array(data: &Array2<f32>, modality: Option<Modality>) -> Vec<u8> {
    let (rows, cols) = data.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ARRAY_FORMAT_VERSION.to_le_bytes());
    out.push(modality_tag(modality));
    out.push(DTYPE_F32);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_array(bytes: &[u8], path: &Path) -> Result<(Array2<f32>, Option<Modality>)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing array header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != ARRAY_FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported array version {version}")));
    }
    let modality = match bytes[6] {
        0 => Some(Modality::Intensity),
        1 => Some(Modality::Phase),
        255 => None,
        t => return Err(Error::format(path, format!("unknown modality tag {t}"))),
    };
    if bytes[7] != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype tag {}", bytes[7])));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!("expected {} data bytes, found {}", rows * cols * 4, body.len()),
        ));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((data, modality))
}

pub fn write_array(path: &Path, data: &Array2<f32>, modality: Option<Modality>) -> Result<()> {
    let bytes = encode_array(data, modality);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<(Array2<f32>, Option<Modality>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes, path)
}

/// Serialize `value` as pretty JSON and write it atomically-enough for our
/// purposes (write to a sibling temp file, then rename).
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn create_dir_all(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
