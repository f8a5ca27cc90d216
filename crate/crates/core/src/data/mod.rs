//! Image classification datasets: loaders, subsets and minibatch orders.

mod cifar;
mod idx;
pub mod synth;

pub use cifar::{encode_cifar10, load_cifar10_bin, parse_cifar10};
pub use idx::{
    encode_idx_images, encode_idx_labels, load_mnist_idx, parse_idx_images, parse_idx_labels,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Tensor;

pub const NUM_CLASSES: usize = 10;

/// Images `[n, c, h, w]` scaled to `[0, 1]` with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    images: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape {
                op: "dataset images",
                left: vec![4],
                right: vec![images.rank()],
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "dataset labels",
                left: vec![images.shape()[0]],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::Index {
                index: bad,
                bound: NUM_CLASSES,
            });
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[c, h, w]` of one image.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let k = self.sample_len();
        &self.images.data()[i * k..(i + 1) * k]
    }

    /// Copies the listed samples into a flat input buffer and label list.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        (inputs, labels)
    }

    /// First `n` samples after a seeded shuffle; the whole set when `n >= len`.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(n);
        let (inputs, labels) = self.gather(&order);
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        Dataset {
            name: format!("{}[{n}@{seed}]", self.name),
            images: Tensor::new(shape, inputs).expect("gathered sizes match"),
            labels,
        }
    }
}

/// Index slices for one epoch. The permutation depends only on `(seed, epoch)`;
/// the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    batch_indices(dataset.len(), batch_size, seed, epoch)
}
