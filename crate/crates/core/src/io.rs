//! Flat little-endian array files and structured-text helpers.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write_f32_le(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} bytes is not a whole number of f32 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Row-major real image, no header.
pub fn write_image(path: &Path, img: &Array2<f64>) -> Result<()> {
    write_f32_le(path, img.iter().copied())
}

pub fn read_image(path: &Path, shape: (usize, usize)) -> Result<Array2<f64>> {
    let data = read_f32_le(path)?;
    Array2::from_shape_vec(shape, data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("expected {}x{} image: {e}", shape.0, shape.1),
    })
}

/// Interleaved real/imaginary f32 pairs, row-major.
pub fn write_complex(path: &Path, values: &Array2<Complex64>) -> Result<()> {
    write_f32_le(path, values.iter().flat_map(|c| [c.re, c.im]))
}

/// Reads interleaved complex data with `rows` rows; the column count follows
/// from the file length.
pub fn read_complex(path: &Path, rows: usize) -> Result<Array2<Complex64>> {
    let data = read_f32_le(path)?;
    if rows == 0 || data.len() % (2 * rows) != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} values cannot form {rows} complex rows", data.len()),
        });
    }
    let cols = data.len() / (2 * rows);
    let vals = data.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
    Ok(Array2::from_shape_vec((rows, cols), vals).expect("length checked"))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    write_bytes(path, text.as_bytes())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
