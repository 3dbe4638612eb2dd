use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageShape};
use crate::error::{DtsError, Result};
use crate::rng::{self, streams};

/// A labeled example with its label remapped into `1..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub input: Vec<f64>,
    pub label: usize,
    pub source_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledExample {
    pub input: Vec<f64>,
    pub source_index: usize,
}

/// Ground-truth seen/unseen membership of the unlabeled set. Training code
/// never reads it; only evaluation calls [`HiddenFlags::reveal`].
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenFlags(Vec<bool>);

impl HiddenFlags {
    pub fn new(unseen: Vec<bool>) -> Self {
        HiddenFlags(unseen)
    }

    pub fn reveal(&self) -> &[bool] {
        &self.0
    }

    pub fn unseen_count(&self) -> usize {
        self.0.iter().filter(|f| **f).count()
    }
}

#[derive(Clone, Debug)]
pub struct MismatchSplit {
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<UnlabeledExample>,
    pub test: Vec<LabeledExample>,
    /// Original class ids of the seen classes; entry `i` is remapped to `i + 1`.
    pub seen_class_ids: Vec<usize>,
    pub mismatch_ratio: f64,
    pub dim: usize,
    pub image_shape: Option<ImageShape>,
    hidden: HiddenFlags,
    manifest: SplitManifest,
}

/// Persisted partition indices; rebuilding from a manifest is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: String,
    pub seed: u64,
    pub seen_class_ids: Vec<usize>,
    pub mismatch_ratio: f64,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

impl MismatchSplit {
    pub fn num_seen_classes(&self) -> usize {
        self.seen_class_ids.len()
    }

    pub fn hidden_flags(&self) -> &HiddenFlags {
        &self.hidden
    }

    pub fn manifest(&self) -> &SplitManifest {
        &self.manifest
    }

    /// Rebuilds a split from its manifest against the same dataset.
    pub fn from_manifest(dataset: &Dataset, manifest: &SplitManifest) -> Result<Self> {
        let seen = validate_seen_ids(dataset, &manifest.seen_class_ids, manifest.mismatch_ratio)?;
        let remap = |label: usize| seen.iter().position(|&c| c == label).map(|p| p + 1);
        let fetch = |idx: usize| {
            dataset.examples.get(idx).ok_or_else(|| {
                DtsError::validation(format!(
                    "manifest index {} out of range for dataset of {}",
                    idx,
                    dataset.len()
                ))
            })
        };
        let labeled_part = |indices: &[usize], part: &str| -> Result<Vec<LabeledExample>> {
            indices
                .iter()
                .map(|&idx| {
                    let ex = fetch(idx)?;
                    let label = remap(ex.label).ok_or_else(|| {
                        DtsError::validation(format!(
                            "{} partition holds index {} of unseen class {}",
                            part, idx, ex.label
                        ))
                    })?;
                    Ok(LabeledExample {
                        input: ex.input.clone(),
                        label,
                        source_index: idx,
                    })
                })
                .collect()
        };
        let labeled = labeled_part(&manifest.labeled, "labeled")?;
        let test = labeled_part(&manifest.test, "test")?;
        let mut unlabeled = Vec::with_capacity(manifest.unlabeled.len());
        let mut flags = Vec::with_capacity(manifest.unlabeled.len());
        for &idx in &manifest.unlabeled {
            let ex = fetch(idx)?;
            flags.push(remap(ex.label).is_none());
            unlabeled.push(UnlabeledExample {
                input: ex.input.clone(),
                source_index: idx,
            });
        }
        Ok(MismatchSplit {
            labeled,
            unlabeled,
            test,
            seen_class_ids: seen,
            mismatch_ratio: manifest.mismatch_ratio,
            dim: dataset.dim(),
            image_shape: dataset.image_shape,
            hidden: HiddenFlags(flags),
            manifest: manifest.clone(),
        })
    }
}

fn validate_seen_ids(dataset: &Dataset, seen_class_ids: &[usize], ratio: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) || ratio.is_nan() {
        return Err(DtsError::validation(format!(
            "mismatch ratio {} outside [0, 1]",
            ratio
        )));
    }
    if seen_class_ids.is_empty() {
        return Err(DtsError::validation("seen class set is empty"));
    }
    let unique: BTreeSet<usize> = seen_class_ids.iter().copied().collect();
    if unique.len() != seen_class_ids.len() {
        return Err(DtsError::validation("seen class ids contain duplicates"));
    }
    if let Some(bad) = unique.iter().find(|&&c| c == 0 || c > dataset.class_count) {
        return Err(DtsError::validation(format!(
            "seen class id {} outside 1..={}",
            bad, dataset.class_count
        )));
    }
    if ratio > 0.0 && unique.len() == dataset.class_count {
        return Err(DtsError::validation(
            "mismatch ratio > 0 requires at least one unseen class",
        ));
    }
    Ok(unique.into_iter().collect())
}

/// Builds a class-mismatch split.
///
/// Labeled examples are drawn stratified over the seen classes, the test set
/// takes `round(test_fraction * |seen pool|)` of the remaining seen examples,
/// and the unlabeled set mixes `n - round(n * ratio)` seen with
/// `round(n * ratio)` unseen examples. Seen ids are sorted and remapped to
/// `1..=K`.
pub fn build_mismatch_split(
    dataset: &Dataset,
    seen_class_ids: &[usize],
    ratio: f64,
    m: usize,
    n: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<MismatchSplit> {
    let seen = validate_seen_ids(dataset, seen_class_ids, ratio)?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DtsError::validation(format!(
            "test fraction {} outside [0, 1)",
            test_fraction
        )));
    }
    let k = seen.len();
    let mut rng = rng::stream(seed, streams::SPLIT);

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut unseen_pool = Vec::new();
    for (idx, ex) in dataset.examples.iter().enumerate() {
        match seen.iter().position(|&c| c == ex.label) {
            Some(p) => per_class[p].push(idx),
            None => unseen_pool.push(idx),
        }
    }
    let seen_total: usize = per_class.iter().map(Vec::len).sum();

    let mut labeled_idx = Vec::with_capacity(m);
    let mut rest = Vec::with_capacity(seen_total);
    for (c, pool) in per_class.iter_mut().enumerate() {
        pool.shuffle(&mut rng);
        let quota = m / k + usize::from(c < m % k);
        if pool.len() < quota {
            return Err(DtsError::Capacity {
                pool: "labeled",
                needed: quota,
                available: pool.len(),
            });
        }
        labeled_idx.extend_from_slice(&pool[..quota]);
        rest.extend_from_slice(&pool[quota..]);
    }
    labeled_idx.shuffle(&mut rng);
    rest.shuffle(&mut rng);

    let test_count = (test_fraction * seen_total as f64).round() as usize;
    if rest.len() < test_count {
        return Err(DtsError::Capacity {
            pool: "test",
            needed: test_count,
            available: rest.len(),
        });
    }
    let test_idx: Vec<usize> = rest.drain(..test_count).collect();

    let unseen_count = (n as f64 * ratio).round() as usize;
    let seen_count = n - unseen_count;
    if rest.len() < seen_count {
        return Err(DtsError::Capacity {
            pool: "unlabeled seen",
            needed: seen_count,
            available: rest.len(),
        });
    }
    unseen_pool.shuffle(&mut rng);
    if unseen_pool.len() < unseen_count {
        return Err(DtsError::Capacity {
            pool: "unlabeled unseen",
            needed: unseen_count,
            available: unseen_pool.len(),
        });
    }
    let mut unlabeled_idx: Vec<usize> = rest[..seen_count].to_vec();
    unlabeled_idx.extend_from_slice(&unseen_pool[..unseen_count]);
    unlabeled_idx.shuffle(&mut rng);

    let manifest = SplitManifest {
        dataset: dataset.name.clone(),
        seed,
        seen_class_ids: seen,
        mismatch_ratio: ratio,
        labeled: labeled_idx,
        unlabeled: unlabeled_idx,
        test: test_idx,
    };
    MismatchSplit::from_manifest(dataset, &manifest)
}
