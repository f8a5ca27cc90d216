// MNIST IDX files: big-endian u32 header words, then raw u8 payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Tensor;

use super::Dataset;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn header(bytes: &[u8], words: usize) -> Result<Vec<u32>> {
    let need = 4 * words;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    Ok(bytes[..need]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_magic(got: u32, want: u32, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Format(format!(
            "{what}: bad magic 0x{got:08x} (expected 0x{want:08x})"
        )));
    }
    Ok(())
}

/// Returns `(n, rows, cols, pixels)` with pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let h = header(bytes, 4)?;
    check_magic(h[0], IDX_IMAGES_MAGIC, "idx images")?;
    let (n, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let h = header(bytes, 2)?;
    check_magic(h[0], IDX_LABELS_MAGIC, "idx labels")?;
    let n = h[1] as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..need].iter().map(|&b| b as usize).collect())
}

pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())));
    let (n, rows, cols, pixels) = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            n,
            labels.len()
        )));
    }
    let name = images_path
        .file_name()
        .map_or_else(|| "mnist".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, Tensor::new(vec![n, 1, rows, cols], pixels)?, labels)
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * rows * cols, "pixel count");
    let mut out = Vec::with_capacity(16 + pixels.len());
    for w in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
