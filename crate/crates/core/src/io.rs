//! Raw little-endian `f64` blobs and JSON manifests.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub fn write_blob(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected_len * 8, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_blob(path, t.data())
}

pub fn read_tensor(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = read_blob(path, n)?;
    Ok(Tensor::new(shape.to_vec(), data)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_length_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_blob(&p, &[1.0, -0.5, f64::MIN_POSITIVE]).unwrap();
        assert_eq!(
            read_blob(&p, 3).unwrap(),
            vec![1.0, -0.5, f64::MIN_POSITIVE]
        );
        assert!(matches!(read_blob(&p, 4), Err(Error::Format { .. })));
        assert_eq!(std::fs::read(&p).unwrap()[..8], 1.0f64.to_le_bytes());
    }
}
