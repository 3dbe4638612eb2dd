//! Inference and metrics: seen-class accuracy from the inlier student and
//! unseen-class detection AUROC from the students' uncertainty score.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{HiddenFlags, LabeledExample, UnlabeledExample};
use crate::error::{DtsError, Result};
use crate::models::Network;
use crate::soft_weighting::blend;
use crate::tensor::{argmax, max_value, Matrix};

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    /// Lower edges of equal-width bins over `[0, 1]`.
    pub lower_edges: Vec<f64>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl ScoreHistogram {
    pub fn new(scores: &[f64], unseen: &[bool], bins: usize) -> Self {
        let mut h = ScoreHistogram {
            lower_edges: (0..bins).map(|b| b as f64 / bins as f64).collect(),
            seen: vec![0; bins],
            unseen: vec![0; bins],
        };
        for (s, u) in scores.iter().zip(unseen) {
            let bin = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            if *u {
                h.unseen[bin] += 1;
            } else {
                h.seen[bin] += 1;
            }
        }
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        w.write_record(["bin_lower", "bin_upper", "seen", "unseen"])?;
        let width = 1.0 / self.lower_edges.len() as f64;
        for (i, lo) in self.lower_edges.iter().enumerate() {
            w.write_record([
                lo.to_string(),
                (lo + width).to_string(),
                self.seen[i].to_string(),
                self.unseen[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub auroc: f64,
    pub per_class_accuracy: BTreeMap<usize, f64>,
    pub score_histogram: ScoreHistogram,
    pub mean_score_seen: f64,
    pub mean_score_unseen: f64,
}

fn to_matrix<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<Matrix> {
    let rows: Vec<&[f64]> = rows.collect();
    Matrix::from_rows(&rows, dim)
}

/// Argmax over the seen-class distribution, as 1-based class ids. Ties go to
/// the lowest class.
pub fn predict_labels(student_in: &Network, inputs: &Matrix) -> Result<Vec<usize>> {
    let p = student_in.seen_probs(inputs)?;
    Ok(p.iter_rows().map(|r| argmax(r) + 1).collect())
}

pub fn compute_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(DtsError::validation("accuracy over an empty set"));
    }
    if predictions.len() != labels.len() {
        return Err(DtsError::shape("predictions and labels differ in length"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Area under the ROC curve with unseen as the positive class, via midranks.
///
/// Equal to the fraction of (unseen, seen) pairs ordered correctly by score,
/// ties counting one half. The numerator is accumulated in integer
/// half-units so the result is exact.
pub fn compute_auroc(scores: &[f64], is_unseen: &[bool]) -> Result<f64> {
    if scores.len() != is_unseen.len() {
        return Err(DtsError::shape("scores and flags differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DtsError::validation("AUROC scores contain NaN"));
    }
    let positives = is_unseen.iter().filter(|u| **u).count() as u128;
    let negatives = scores.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(DtsError::UndefinedMetric(
            "AUROC needs at least one unseen and one seen example".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum of the positives; a tie group occupying sorted
    // positions start..end has midrank (start + 1 + end) / 2.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group_pos = order[start..end].iter().filter(|&&i| is_unseen[i]).count() as u128;
        twice_rank_sum += group_pos * (start as u128 + 1 + end as u128);
        start = end;
    }
    let twice_u = twice_rank_sum - positives * (positives + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// Uncertainty scores on raw (un-augmented) inputs from the two students.
pub fn inference_scores(
    student_in: &Network,
    student_out: &Network,
    inputs: &Matrix,
    gamma: f64,
) -> Result<Vec<f64>> {
    let p_in = student_in.seen_probs(inputs)?;
    let evidence = student_out.unseen_evidence(inputs)?;
    Ok(p_in
        .iter_rows()
        .zip(&evidence)
        .map(|(p, e)| blend(1.0 - max_value(p), *e, gamma).value)
        .collect())
}

pub fn run_inference(
    student_in: &Network,
    student_out: &Network,
    test: &[LabeledExample],
    unlabeled: &[UnlabeledExample],
    flags: &HiddenFlags,
    gamma: f64,
) -> Result<EvalResult> {
    if test.is_empty() || unlabeled.is_empty() {
        return Err(DtsError::validation("inference needs non-empty test and unlabeled sets"));
    }
    let dim = student_in.spec().backbone.input_dim;
    let x_test = to_matrix(test.iter().map(|e| e.input.as_slice()), dim)?;
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    let predictions = predict_labels(student_in, &x_test)?;
    let accuracy = compute_accuracy(&predictions, &labels)?;

    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, y) in predictions.iter().zip(&labels) {
        let e = per_class.entry(*y).or_default();
        e.0 += usize::from(p == y);
        e.1 += 1;
    }
    let per_class_accuracy = per_class
        .into_iter()
        .map(|(c, (hit, total))| (c, hit as f64 / total as f64))
        .collect();

    let x_u = to_matrix(unlabeled.iter().map(|e| e.input.as_slice()), dim)?;
    let scores = inference_scores(student_in, student_out, &x_u, gamma)?;
    let unseen = flags.reveal();
    let auroc = compute_auroc(&scores, unseen)?;
    let mean_where = |want: bool| {
        let (sum, count) = scores
            .iter()
            .zip(unseen)
            .filter(|(_, u)| **u == want)
            .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };
    Ok(EvalResult {
        accuracy,
        auroc,
        per_class_accuracy,
        score_histogram: ScoreHistogram::new(&scores, unseen, HISTOGRAM_BINS),
        mean_score_seen: mean_where(false),
        mean_score_unseen: mean_where(true),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_teacher, BackboneSpec};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Quadratic pairwise oracle.
    fn auroc_pairwise(scores: &[f64], unseen: &[bool]) -> f64 {
        let mut twice = 0u64;
        let mut pairs = 0u64;
        for i in (0..scores.len()).filter(|&i| unseen[i]) {
            for j in (0..scores.len()).filter(|&j| !unseen[j]) {
                pairs += 1;
                if scores[i] > scores[j] {
                    twice += 2;
                } else if scores[i] == scores[j] {
                    twice += 1;
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(compute_auroc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(compute_auroc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        let v = compute_auroc(&[0.9, 0.2, 0.3, 0.4], &[true, false, true, false]).unwrap();
        assert_eq!(v, 0.75);
        assert!(matches!(
            compute_auroc(&[0.1, 0.2], &[true, true]),
            Err(DtsError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(compute_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(compute_accuracy(&[1, 2, 3, 4], &[1, 2, 1, 1]).unwrap(), 0.5);
        assert_eq!(compute_accuracy(&[1, 2, 3], &[1, 2, 1]).unwrap(), 2.0 / 3.0);
        assert!(matches!(compute_accuracy(&[], &[]), Err(DtsError::Validation(_))));
    }

    #[test]
    fn histogram_puts_one_in_last_bin() {
        let h = ScoreHistogram::new(&[0.0, 0.55, 1.0], &[false, true, true], 10);
        assert_eq!(h.seen[0], 1);
        assert_eq!(h.unseen[5], 1);
        assert_eq!(h.unseen[9], 1);
    }

    fn random_models(seed: u64) -> (Network, Network) {
        let spec = BackboneSpec::mlp(6, vec![16], 8);
        let t = init_teacher(spec, 4, seed).unwrap();
        (t.with_heads(true, false).unwrap(), t.with_heads(false, true).unwrap())
    }

    #[test]
    fn batched_prediction_equals_per_example() {
        let (si, _) = random_models(2);
        let mut r = rng::stream(8, 0);
        let x = Matrix::from_vec(7, 6, (0..42).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let batched = predict_labels(&si, &x).unwrap();
        for i in 0..7 {
            let single = Matrix::from_vec(1, 6, x.row(i).to_vec()).unwrap();
            assert_eq!(predict_labels(&si, &single).unwrap(), vec![batched[i]]);
        }
    }

    #[test]
    fn untrained_models_score_at_chance() {
        // One shared input distribution, so labels and flags carry no signal.
        let (si, so) = random_models(5);
        let mut r = rng::stream(21, 0);
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..6).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).collect()
        };
        let test: Vec<LabeledExample> = draw(1000)
            .into_iter()
            .enumerate()
            .map(|(i, input)| LabeledExample { input, label: i % 4 + 1, source_index: i })
            .collect();
        let unlabeled: Vec<UnlabeledExample> = draw(1000)
            .into_iter()
            .enumerate()
            .map(|(i, input)| UnlabeledExample { input, source_index: i })
            .collect();
        let flags = HiddenFlags::new((0..1000).map(|i| i % 2 == 0).collect());
        let res = run_inference(&si, &so, &test, &unlabeled, &flags, 0.5).unwrap();
        assert!((res.accuracy - 0.25).abs() < 0.1, "accuracy {}", res.accuracy);
        assert!((res.auroc - 0.5).abs() < 0.1, "auroc {}", res.auroc);
        let again = run_inference(&si, &so, &test, &unlabeled, &flags, 0.5).unwrap();
        assert_eq!(res, again);
    }

    proptest! {
        #[test]
        fn auroc_matches_oracle(
            data in prop::collection::vec((0u8..8, any::<bool>()), 2..120)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s) / 7.0).collect();
            let flags: Vec<bool> = data.iter().map(|(_, f)| *f).collect();
            prop_assume!(flags.iter().any(|f| *f) && flags.iter().any(|f| !*f));
            prop_assert_eq!(compute_auroc(&scores, &flags).unwrap(), auroc_pairwise(&scores, &flags));
        }

        #[test]
        fn auroc_invariant_under_monotone_transform(
            data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..80)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let flags: Vec<bool> = data.iter().map(|(_, f)| *f).collect();
            prop_assume!(flags.iter().any(|f| *f) && flags.iter().any(|f| !*f));
            let transformed: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(compute_auroc(&scores, &flags).unwrap(), compute_auroc(&transformed, &flags).unwrap());
        }

        #[test]
        fn metrics_ignore_example_order(
            data in prop::collection::vec((0u8..5, any::<bool>(), 1usize..4, 1usize..4), 2..60),
            rotate in 0usize..60
        ) {
            let scores: Vec<f64> = data.iter().map(|d| f64::from(d.0)).collect();
            let flags: Vec<bool> = data.iter().map(|d| d.1).collect();
            let preds: Vec<usize> = data.iter().map(|d| d.2).collect();
            let labels: Vec<usize> = data.iter().map(|d| d.3).collect();
            let r = rotate % data.len();
            let rot = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(r); v };
            let mut flags_r = flags.clone(); flags_r.rotate_left(r);
            let mut preds_r = preds.clone(); preds_r.rotate_left(r);
            let mut labels_r = labels.clone(); labels_r.rotate_left(r);
            let acc = compute_accuracy(&preds, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert_eq!(acc, compute_accuracy(&preds_r, &labels_r).unwrap());
            if flags.iter().any(|f| *f) && flags.iter().any(|f| !*f) {
                prop_assert_eq!(compute_auroc(&scores, &flags).unwrap(), compute_auroc(&rot(&scores), &flags_r).unwrap());
            }
        }
    }
}
