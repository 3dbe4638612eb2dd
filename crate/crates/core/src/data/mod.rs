//! Datasets, class-mismatch splits, augmentation and batch sampling.

mod augment;
mod batch;
mod io;
mod split;
mod synthetic;

pub use augment::{AugmentConfig, AugmentMode, AugmentedView, Augmenter};
pub use batch::{BatchPair, BatchSampler};
pub use io::{load_cifar10_binary, read_dataset_csv, write_dataset_csv, DatasetMeta};
pub use split::{
    build_mismatch_split, HiddenFlags, LabeledExample, MismatchSplit, SplitManifest,
    UnlabeledExample,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{DtsError, Result};

/// Channel-height-width layout of an image stored as a flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A raw example with its original class id (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub class_count: usize,
    pub examples: Vec<Example>,
    pub image_shape: Option<ImageShape>,
}

impl Dataset {
    /// Validates that every vector has one dimension and every label lies in
    /// `1..=class_count`.
    pub fn new(
        name: impl Into<String>,
        class_count: usize,
        examples: Vec<Example>,
        image_shape: Option<ImageShape>,
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(DtsError::validation("dataset needs at least one class"));
        }
        if let Some(first) = examples.first() {
            let dim = first.input.len();
            if dim == 0 {
                return Err(DtsError::validation("input vectors must be non-empty"));
            }
            if let Some(shape) = image_shape {
                if shape.len() != dim {
                    return Err(DtsError::shape(format!(
                        "image shape {}x{}x{} does not match dimension {}",
                        shape.channels, shape.height, shape.width, dim
                    )));
                }
            }
            for (i, ex) in examples.iter().enumerate() {
                if ex.input.len() != dim {
                    return Err(DtsError::shape(format!(
                        "example {} has dimension {}, expected {}",
                        i,
                        ex.input.len(),
                        dim
                    )));
                }
                if ex.label == 0 || ex.label > class_count {
                    return Err(DtsError::validation(format!(
                        "example {} has label {} outside 1..={}",
                        i, ex.label, class_count
                    )));
                }
            }
        }
        Ok(Dataset {
            name: name.into(),
            class_count,
            examples,
            image_shape,
        })
    }

    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.input.len())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for ex in &self.examples {
            counts[ex.label - 1] += 1;
        }
        counts
    }
}
