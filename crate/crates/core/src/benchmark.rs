//! The synthetic class-mismatch benchmark used for desk-scale comparisons.

use serde::{Deserialize, Serialize};

use crate::data::{build_mismatch_split, generate_synthetic, MismatchSplit, SyntheticSpec};
use crate::error::Result;
use crate::trainer::{AblationMode, TrainConfig};

/// Dataset, split sizes and training schedule of one benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark {
    pub synthetic: SyntheticSpec,
    pub seen_class_ids: Vec<usize>,
    pub mismatch_ratio: f64,
    pub labeled_size: usize,
    pub unlabeled_size: usize,
    pub test_fraction: f64,
    pub steps_per_epoch: usize,
}

impl Benchmark {
    /// Four seen and two unseen Gaussian classes in 16 dimensions, 80
    /// labeled and 2000 unlabeled examples, half of them unseen.
    pub fn desk(seed: u64) -> Self {
        Benchmark {
            synthetic: SyntheticSpec {
                k_seen: 4,
                k_unseen: 2,
                dim: 16,
                per_class: 700,
                separation: 3.25,
                noise: 1.0,
                seed,
            },
            seen_class_ids: vec![1, 2, 3, 4],
            mismatch_ratio: 0.5,
            labeled_size: 80,
            unlabeled_size: 2000,
            test_fraction: 0.25,
            steps_per_epoch: 60,
        }
    }

    pub fn seed(&self) -> u64 {
        self.synthetic.seed
    }

    pub fn split(&self) -> Result<MismatchSplit> {
        let dataset = generate_synthetic(&self.synthetic)?;
        build_mismatch_split(
            &dataset,
            &self.seen_class_ids,
            self.mismatch_ratio,
            self.labeled_size,
            self.unlabeled_size,
            self.test_fraction,
            self.seed(),
        )
    }

    /// Desk training schedule for this benchmark under `mode`.
    pub fn config(&self, mode: AblationMode) -> TrainConfig {
        TrainConfig {
            steps_per_epoch: Some(self.steps_per_epoch),
            ablation: mode,
            seed: self.seed(),
            ..TrainConfig::desk()
        }
    }
}
