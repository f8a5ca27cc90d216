//! Procedural stand-in for MNIST: seven-segment digit glyphs on a 28×28 canvas
//! with random size, position, slant, stroke width and pixel noise. Written in
//! the IDX format so it goes through the same loader as the real files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::idx::{encode_idx_images, encode_idx_labels};

pub const SIDE: usize = 28;

// Segments a..g as bits 0..6: top, upper right, lower right, bottom, lower left, upper left, middle.
const GLYPHS: [u8; 10] = [
    0b011_1111, 0b000_0110, 0b101_1011, 0b100_1111, 0b110_0110,
    0b110_1101, 0b111_1101, 0b000_0111, 0b111_1111, 0b110_1111,
];

/// Segment endpoints in unit-box coordinates, y pointing down.
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.0, 0.0), (1.0, 0.0)),
    ((1.0, 0.0), (1.0, 0.5)),
    ((1.0, 0.5), (1.0, 1.0)),
    ((0.0, 1.0), (1.0, 1.0)),
    ((0.0, 0.5), (0.0, 1.0)),
    ((0.0, 0.0), (0.0, 0.5)),
    ((0.0, 0.5), (1.0, 0.5)),
];

fn seg_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((px - a.0) * dx + (py - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn render(digit: usize, rng: &mut ChaCha8Rng, out: &mut [u8]) {
    let w = rng.random_range(9.0..14.0);
    let h = rng.random_range(15.0..20.0);
    let x0 = (SIDE as f64 - w) / 2.0 + rng.random_range(-2.5..2.5);
    let y0 = (SIDE as f64 - h) / 2.0 + rng.random_range(-2.5..2.5);
    let slant = rng.random_range(-0.25..0.25);
    let half_width = rng.random_range(0.9..1.7);
    let ink = rng.random_range(170.0..255.0);
    let map = |(u, v): (f64, f64)| (x0 + u * w + slant * (0.5 - v) * h, y0 + v * h);
    let mut segs = Vec::with_capacity(7);
    for (bit, &(a, b)) in SEGMENTS.iter().enumerate() {
        if GLYPHS[digit] >> bit & 1 == 1 {
            let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.06..0.06);
            let a = map((a.0 + j(rng), a.1 + j(rng)));
            let b = map((b.0 + j(rng), b.1 + j(rng)));
            segs.push((a, b));
        }
    }
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segs
                .iter()
                .map(|&(a, b)| seg_distance(px, py, a, b))
                .fold(f64::INFINITY, f64::min);
            let cover = (half_width + 0.5 - d).clamp(0.0, 1.0);
            let mut v = cover * ink;
            if rng.random_bool(0.03) {
                v = (v + rng.random_range(0.0..160.0)).min(255.0);
            }
            out[y * SIDE + x] = v.round() as u8;
        }
    }
}

/// `n` images (row-major 28×28 bytes each) and labels, cycling evenly through the classes
/// in a seeded order.
pub fn synthetic_digits(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in pixels.chunks_exact_mut(SIDE * SIDE).enumerate() {
        let digit = if i % 10 == 0 { rng.random_range(0..10) } else { (labels[i - 1] as usize + 7) % 10 };
        render(digit, &mut rng, img);
        labels.push(digit as u8);
    }
    (pixels, labels)
}

/// Writes `<prefix>-images-idx3-ubyte` and `<prefix>-labels-idx1-ubyte` into `dir`.
pub fn write_synthetic_mnist(dir: &Path, prefix: &str, n: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let (pixels, labels) = synthetic_digits(n, seed);
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let label_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    fs::write(&images, encode_idx_images(n, SIDE, SIDE, &pixels))?;
    fs::write(&label_path, encode_idx_labels(&labels))?;
    Ok((images, label_path))
}
