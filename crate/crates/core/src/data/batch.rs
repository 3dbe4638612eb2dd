use rand::seq::SliceRandom;
use rand::Rng;

use super::MismatchSplit;
use crate::error::{DtsError, Result};
use crate::rng::{self, streams, DtsRng};

/// One optimization step's worth of data: `B` labeled and `mu * B`
/// unlabeled examples. Unlabeled entries carry no ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPair {
    pub labeled_inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub unlabeled_inputs: Vec<Vec<f64>>,
    /// Positions in `split.unlabeled`, for score auditing.
    pub unlabeled_indices: Vec<usize>,
}

impl BatchPair {
    pub fn labeled_len(&self) -> usize {
        self.labels.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled_inputs.len()
    }
}

/// Labeled examples are visited in a fresh permutation every epoch;
/// unlabeled examples are drawn uniformly with replacement.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    batch_size: usize,
    mu: usize,
    order: Vec<usize>,
    cursor: usize,
    epochs_started: usize,
    rng: DtsRng,
}

impl BatchSampler {
    pub fn new(split: &MismatchSplit, batch_size: usize, mu: usize, seed: u64) -> Result<Self> {
        Self::with_rng(split, batch_size, mu, rng::stream(seed, streams::SAMPLER))
    }

    pub fn with_rng(split: &MismatchSplit, batch_size: usize, mu: usize, rng: DtsRng) -> Result<Self> {
        if batch_size == 0 || mu == 0 {
            return Err(DtsError::validation("batch size and mu must be at least 1"));
        }
        if split.labeled.is_empty() {
            return Err(DtsError::validation("split has no labeled examples"));
        }
        Ok(BatchSampler {
            batch_size,
            mu,
            order: (0..split.labeled.len()).collect(),
            cursor: split.labeled.len(),
            epochs_started: 0,
            rng,
        })
    }

    /// Labeled-only batch for pre-training.
    pub fn next_labeled(&mut self, split: &MismatchSplit) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut inputs = Vec::with_capacity(self.batch_size);
        let mut labels = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epochs_started += 1;
            }
            let ex = &split.labeled[self.order[self.cursor]];
            self.cursor += 1;
            inputs.push(ex.input.clone());
            labels.push(ex.label);
        }
        (inputs, labels)
    }

    pub fn next_batch_pair(&mut self, split: &MismatchSplit) -> Result<BatchPair> {
        if split.unlabeled.is_empty() {
            return Err(DtsError::validation("split has no unlabeled examples"));
        }
        let (labeled_inputs, labels) = self.next_labeled(split);
        let count = self.mu * self.batch_size;
        let mut unlabeled_inputs = Vec::with_capacity(count);
        let mut unlabeled_indices = Vec::with_capacity(count);
        for _ in 0..count {
            let idx = self.rng.random_range(0..split.unlabeled.len());
            unlabeled_indices.push(idx);
            unlabeled_inputs.push(split.unlabeled[idx].input.clone());
        }
        Ok(BatchPair {
            labeled_inputs,
            labels,
            unlabeled_inputs,
            unlabeled_indices,
        })
    }

    /// Number of labeled permutations begun so far.
    pub fn epochs_started(&self) -> usize {
        self.epochs_started
    }
}
