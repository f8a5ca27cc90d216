use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Tensor;

/// Observations are shared: the `s_next` of one step is the `s` of the next.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Arc<Tensor>,
    pub a: usize,
    pub r: f64,
    pub s_next: Arc<Tensor>,
    pub done: bool,
}

/// Fixed-capacity ring, sampled uniformly with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Contract("replay capacity must be >= 1".into()));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn sample(&mut self, batch_size: usize) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::Contract("sampling from an empty replay buffer".into()));
        }
        Ok((0..batch_size)
            .map(|_| self.items[self.rng.random_range(0..self.items.len())].clone())
            .collect())
    }
}
