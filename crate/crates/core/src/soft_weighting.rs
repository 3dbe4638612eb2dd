//! Uncertainty scoring of unlabeled examples and the reliability gate that
//! admits them into pseudo-labeled seen-class training.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentMode, AugmentedView, Augmenter, UnlabeledExample};
use crate::error::{DtsError, Result};
use crate::models::{HeadKind, Network};
use crate::rng::DtsRng;
use crate::tensor::{max_value, Matrix};

/// Probability vectors must sum to one within this tolerance.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub value: f64,
    pub one_minus_max_its: f64,
    pub ots_last: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub passed: bool,
    pub max_its: f64,
    pub score: f64,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftWeightedEntry {
    /// Position in the unlabeled set.
    pub index: usize,
    pub source_index: usize,
    pub weight: f64,
}

/// Every unlabeled example paired with its score as an unseen-class weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftWeightedSet {
    pub entries: Vec<SoftWeightedEntry>,
}

impl SoftWeightedSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }
}

pub(crate) fn check_simplex(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(DtsError::validation(format!("{name} is empty")));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(DtsError::validation(format!(
            "{name} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DtsError::validation(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(())
}

/// `gamma * (1 - max(p_its)) + (1 - gamma) * p_ots[K+1]`.
pub fn uncertainty_score(p_its: &[f64], p_ots: &[f64], gamma: f64) -> Result<UncertaintyScore> {
    check_simplex(p_its, "p_its")?;
    check_simplex(p_ots, "p_ots")?;
    check_gamma(gamma)?;
    if p_ots.len() != p_its.len() + 1 {
        return Err(DtsError::shape(format!(
            "p_ots has {} components, expected {}",
            p_ots.len(),
            p_its.len() + 1
        )));
    }
    Ok(blend(1.0 - max_value(p_its), p_ots[p_ots.len() - 1], gamma))
}

/// Score from its two components directly. Used when the outlier side only
/// has a `K` head and contributes `1 - max` instead of a last component.
pub fn blend(one_minus_max_its: f64, ots_last: f64, gamma: f64) -> UncertaintyScore {
    UncertaintyScore {
        value: gamma * one_minus_max_its + (1.0 - gamma) * ots_last,
        one_minus_max_its,
        ots_last,
        gamma,
    }
}

/// Passes iff `max(p) > tau` and `max(p) > score`; ties fail.
pub fn reliability_gate(p: &[f64], score: f64, tau: f64) -> GateDecision {
    let max_its = max_value(p);
    GateDecision {
        passed: max_its > tau && max_its > score,
        max_its,
        score,
        tau,
    }
}

/// Teacher-side quantities for one batch of weak views.
#[derive(Clone, Debug)]
pub struct TeacherSignals {
    /// Seen-class distribution from the inlier teacher, `K` columns.
    pub p_its: Matrix,
    /// Outlier teacher output on its own head (`K+1` columns, or `K` when
    /// the outlier side has no unseen-class output).
    pub p_ots: Matrix,
    pub scores: Vec<UncertaintyScore>,
}

pub fn teacher_signals(
    teacher_in: &Network,
    teacher_out: &Network,
    views: &Matrix,
    gamma: f64,
) -> Result<TeacherSignals> {
    check_gamma(gamma)?;
    let p_its = teacher_in.seen_probs(views)?;
    let out_head = if teacher_out.has_head(HeadKind::KPlusOne) {
        HeadKind::KPlusOne
    } else {
        HeadKind::K
    };
    let p_ots = teacher_out.forward(views, out_head)?;
    let scores = p_its
        .iter_rows()
        .zip(p_ots.iter_rows())
        .map(|(pi, po)| match out_head {
            HeadKind::KPlusOne => uncertainty_score(pi, po, gamma),
            HeadKind::K => Ok(blend(1.0 - max_value(pi), 1.0 - max_value(po), gamma)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherSignals {
        p_its,
        p_ots,
        scores,
    })
}

/// Weakly augments each example once and scores the shared view with both
/// teachers. With no augmenter the raw inputs are scored.
pub fn score_batch<R: AsRef<[f64]>>(
    teacher_in: &Network,
    teacher_out: &Network,
    batch: &[R],
    gamma: f64,
    augmenter: Option<&Augmenter>,
    rng: &mut DtsRng,
) -> Result<(Vec<AugmentedView>, TeacherSignals)> {
    let views: Vec<AugmentedView> = match augmenter {
        Some(aug) => aug.augment_batch(batch, AugmentMode::Weak, rng),
        None => batch
            .iter()
            .enumerate()
            .map(|(i, x)| AugmentedView {
                input: x.as_ref().to_vec(),
                mode: AugmentMode::Weak,
                source_index: i,
            })
            .collect(),
    };
    let rows: Vec<&[f64]> = views.iter().map(|v| v.input.as_slice()).collect();
    let x = Matrix::from_rows(&rows, teacher_in.spec().backbone.input_dim)?;
    let signals = teacher_signals(teacher_in, teacher_out, &x, gamma)?;
    Ok((views, signals))
}

pub fn build_soft_weighted_set(
    unlabeled: &[UnlabeledExample],
    teacher_in: &Network,
    teacher_out: &Network,
    gamma: f64,
    augmenter: Option<&Augmenter>,
    rng: &mut DtsRng,
) -> Result<SoftWeightedSet> {
    let inputs: Vec<&[f64]> = unlabeled.iter().map(|u| u.input.as_slice()).collect();
    let (_, signals) = score_batch(teacher_in, teacher_out, &inputs, gamma, augmenter, rng)?;
    Ok(SoftWeightedSet {
        entries: unlabeled
            .iter()
            .zip(&signals.scores)
            .enumerate()
            .map(|(index, (u, s))| SoftWeightedEntry {
                index,
                source_index: u.source_index,
                weight: s.value,
            })
            .collect(),
    })
}

/// Columnar dump of `index,score,unseen` rows for offline auditing.
pub fn write_score_dump(path: &Path, scores: &[f64], unseen: &[bool]) -> Result<()> {
    if scores.len() != unseen.len() {
        return Err(DtsError::shape("scores and flags differ in length"));
    }
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(["index", "score", "unseen"])?;
    for (i, (s, u)) in scores.iter().zip(unseen).enumerate() {
        w.write_record([i.to_string(), s.to_string(), u8::from(*u).to_string()])?;
    }
    w.flush()?;
    Ok(())
}
