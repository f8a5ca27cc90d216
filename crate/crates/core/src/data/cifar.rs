use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Tensor;

use super::Dataset;

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
const RECORD: usize = 1 + PIXELS;

/// Records of one label byte followed by the R, G and B planes (32×32 each).
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::Format(format!(
            "cifar-10 file length {} is not a multiple of {RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_cifar10_bin(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let (pixels, labels) = parse_cifar10(&bytes)?;
    let n = labels.len();
    let name = path
        .file_name()
        .map_or_else(|| "cifar10".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, Tensor::new(vec![n, 3, SIDE, SIDE], pixels)?, labels)
}

/// Inverse of [`parse_cifar10`] for `(label, 3072 channel-major bytes)` records.
pub fn encode_cifar10(records: &[(u8, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD);
    for (label, px) in records {
        assert_eq!(px.len(), PIXELS, "cifar record size");
        out.push(*label);
        out.extend_from_slice(px);
    }
    out
}
