//! Fixed-capacity reservoir buffer with Vitter Algorithm R semantics and
//! seeded sampling.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::data::{Example, Target};

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("cannot sample from an empty buffer")]
    EmptyBuffer,
    #[error("buffer holds examples without class labels")]
    NoClassInfo,
}

/// Reservoir of past examples. After `seen` stream items, every item resides
/// in the buffer with probability `min(1, capacity/seen)`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Example>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
        }
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

    /// Stream items offered so far.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[Example] {
        &self.items
    }

    /// Offer a batch to the reservoir, one Algorithm R decision per example.
    pub fn reservoir_update(&mut self, batch: &[Example], rng: &mut impl Rng) {
        for ex in batch {
            self.seen += 1;
            if self.items.len() < self.capacity {
                self.items.push(ex.clone());
            } else {
                let j = rng.gen_range(0..self.seen);
                if (j as usize) < self.capacity {
                    self.items[j as usize] = ex.clone();
                }
            }
        }
    }

    /// `m` items uniformly without replacement, or with replacement when `m`
    /// exceeds the buffer size.
    pub fn sample(&self, m: usize, rng: &mut impl Rng) -> Result<Vec<Example>, ReplayError> {
        if self.items.is_empty() {
            return Err(ReplayError::EmptyBuffer);
        }
        let n = self.items.len();
        if m <= n {
            // partial Fisher-Yates over an index pool
            let mut idx: Vec<usize> = (0..n).collect();
            let mut out = Vec::with_capacity(m);
            for i in 0..m {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
                out.push(self.items[idx[i]].clone());
            }
            Ok(out)
        } else {
            Ok((0..m)
                .map(|_| self.items[rng.gen_range(0..n)].clone())
                .collect())
        }
    }

    /// Number of distinct class ids currently stored. Errors when items lack
    /// class labels (regression / domain-incremental payloads).
    pub fn distinct_classes(&self) -> Result<usize, ReplayError> {
        let mut classes = BTreeSet::new();
        for ex in &self.items {
            match &ex.target {
                Target::Class(c) => {
                    classes.insert(*c);
                }
                Target::Values(_) => return Err(ReplayError::NoClassInfo),
            }
        }
        Ok(classes.len())
    }

    /// Debug dump, one JSON object per stored item. Not a stability contract.
    pub fn dump_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        for ex in &self.items {
            let line = serde_json::to_string(ex).map_err(std::io::Error::other)?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}
