//! Loss primitives and the composite training objectives.
//!
//! Every `*_loss` function evaluates a value from probability rows. The
//! matching `*_grad` function returns the gradient of that value with respect
//! to the pre-softmax logits of the rows it was given.

use serde::{Deserialize, Serialize};

use crate::error::{DtsError, Result};
use crate::soft_weighting::GateDecision;
use crate::tensor::{softmax_backward, Matrix};

/// Probabilities are clamped below at this value before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

/// `-ln p[label]` for a 1-based `label`.
pub fn cross_entropy(label: usize, p: &[f64]) -> Result<f64> {
    if label == 0 || label > p.len() {
        return Err(DtsError::validation(format!(
            "label {} outside 1..={}",
            label,
            p.len()
        )));
    }
    Ok(-clamped_ln(p[label - 1]))
}

/// `-sum target_j ln p_j` for an arbitrary target distribution.
pub fn cross_entropy_soft(target: &[f64], p: &[f64]) -> Result<f64> {
    if target.len() != p.len() {
        return Err(DtsError::shape("target and prediction lengths differ"));
    }
    Ok(-target.iter().zip(p).map(|(t, q)| t * clamped_ln(*q)).sum::<f64>())
}

/// `sum p_i ln(p_i / q_i)`; zero entries of `p` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(DtsError::shape(format!(
            "KL arguments have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (clamped_ln(*pi) - clamped_ln(*qi)))
        .sum())
}

fn d_ce_dp(label: usize, p: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; p.len()];
    let pl = p[label - 1];
    if pl >= LOG_CLAMP {
        g[label - 1] = -1.0 / pl;
    }
    g
}

/// Derivative of `KL(p, q)` with respect to `p`.
fn d_kl_dp(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(pi, qi)| {
            if *pi <= 0.0 {
                0.0
            } else {
                let slope = if *pi >= LOG_CLAMP { 1.0 } else { 0.0 };
                clamped_ln(*pi) - clamped_ln(*qi) + slope
            }
        })
        .collect()
}

/// Derivative of `KL(p, q)` with respect to `q`.
fn d_kl_dq(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(pi, qi)| if *qi >= LOG_CLAMP { -pi / qi } else { 0.0 })
        .collect()
}

fn check_rows(what: &str, probs: &Matrix, n: usize) -> Result<()> {
    if probs.rows() != n {
        return Err(DtsError::shape(format!(
            "{} has {} rows, expected {}",
            what,
            probs.rows(),
            n
        )));
    }
    Ok(())
}

fn check_denominator(mu_b: usize) -> Result<f64> {
    if mu_b == 0 {
        return Err(DtsError::validation("batch denominator must be positive"));
    }
    Ok(mu_b as f64)
}

/// Mean cross-entropy over a labeled batch (1-based labels).
pub fn supervised_loss(labels: &[usize], probs: &Matrix) -> Result<f64> {
    check_rows("probabilities", probs, labels.len())?;
    let n = check_denominator(labels.len())?;
    let mut total = 0.0;
    for (row, &y) in probs.iter_rows().zip(labels) {
        total += cross_entropy(y, row)?;
    }
    Ok(total / n)
}

pub fn supervised_grad(labels: &[usize], probs: &Matrix) -> Result<Matrix> {
    check_rows("probabilities", probs, labels.len())?;
    let n = check_denominator(labels.len())?;
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    for (i, &y) in labels.iter().enumerate() {
        cross_entropy(y, probs.row(i))?;
        let dp: Vec<f64> = d_ce_dp(y, probs.row(i)).iter().map(|v| v / n).collect();
        g.row_mut(i).copy_from_slice(&softmax_backward(probs.row(i), &dp));
    }
    Ok(g)
}

/// `(1/muB) sum H(pseudo_i, p_i) * gate_i`; rejected rows stay in the
/// denominator.
pub fn seen_loss(
    pseudo_labels: &[usize],
    student_strong: &Matrix,
    gates: &[GateDecision],
    mu_b: usize,
) -> Result<f64> {
    let n = check_denominator(mu_b)?;
    check_rows("student predictions", student_strong, pseudo_labels.len())?;
    if gates.len() != pseudo_labels.len() {
        return Err(DtsError::shape("gates and pseudo-labels differ in length"));
    }
    let mut total = 0.0;
    for ((row, &y), gate) in student_strong.iter_rows().zip(pseudo_labels).zip(gates) {
        if gate.passed {
            total += cross_entropy(y, row)?;
        }
    }
    Ok(total / n)
}

pub fn seen_grad(
    pseudo_labels: &[usize],
    student_strong: &Matrix,
    gates: &[GateDecision],
    mu_b: usize,
) -> Result<Matrix> {
    let n = check_denominator(mu_b)?;
    check_rows("student predictions", student_strong, pseudo_labels.len())?;
    if gates.len() != pseudo_labels.len() {
        return Err(DtsError::shape("gates and pseudo-labels differ in length"));
    }
    let mut g = Matrix::zeros(student_strong.rows(), student_strong.cols());
    for (i, (&y, gate)) in pseudo_labels.iter().zip(gates).enumerate() {
        if !gate.passed {
            continue;
        }
        let p = student_strong.row(i);
        cross_entropy(y, p)?;
        let dp: Vec<f64> = d_ce_dp(y, p).iter().map(|v| v / n).collect();
        g.row_mut(i).copy_from_slice(&softmax_backward(p, &dp));
    }
    Ok(g)
}

/// `(1/muB) sum KL(student_i, teacher_i) * gate_i`, student distribution first.
pub fn logit_match_loss(
    student_strong: &Matrix,
    teacher_weak: &Matrix,
    gates: &[GateDecision],
    mu_b: usize,
) -> Result<f64> {
    let n = check_denominator(mu_b)?;
    check_rows("teacher predictions", teacher_weak, student_strong.rows())?;
    if gates.len() != student_strong.rows() {
        return Err(DtsError::shape("gates and predictions differ in length"));
    }
    let mut total = 0.0;
    for ((p, q), gate) in student_strong.iter_rows().zip(teacher_weak.iter_rows()).zip(gates) {
        if gate.passed {
            total += kl_divergence(p, q)?;
        }
    }
    Ok(total / n)
}

/// Gradient with respect to the student logits; the teacher is constant.
pub fn logit_match_grad(
    student_strong: &Matrix,
    teacher_weak: &Matrix,
    gates: &[GateDecision],
    mu_b: usize,
) -> Result<Matrix> {
    let n = check_denominator(mu_b)?;
    check_rows("teacher predictions", teacher_weak, student_strong.rows())?;
    if gates.len() != student_strong.rows() || teacher_weak.cols() != student_strong.cols() {
        return Err(DtsError::shape("gates or predictions misaligned"));
    }
    let mut g = Matrix::zeros(student_strong.rows(), student_strong.cols());
    for (i, gate) in gates.iter().enumerate() {
        if !gate.passed {
            continue;
        }
        let p = student_strong.row(i);
        let dp: Vec<f64> = d_kl_dp(p, teacher_weak.row(i)).iter().map(|v| v / n).collect();
        g.row_mut(i).copy_from_slice(&softmax_backward(p, &dp));
    }
    Ok(g)
}

/// `(1/muB) sum -ln p'_i[K+1] * w_i` where `w_i` is the uncertainty score
/// (or a hard 0/1 mask when soft-weighting is ablated).
pub fn unseen_loss(student_k1_strong: &Matrix, weights: &[f64], mu_b: usize, k: usize) -> Result<f64> {
    let n = check_denominator(mu_b)?;
    check_rows("student predictions", student_k1_strong, weights.len())?;
    if student_k1_strong.cols() != k + 1 {
        return Err(DtsError::shape(format!(
            "unseen loss needs {} columns, got {}",
            k + 1,
            student_k1_strong.cols()
        )));
    }
    let mut total = 0.0;
    for (row, w) in student_k1_strong.iter_rows().zip(weights) {
        total += cross_entropy(k + 1, row)? * w;
    }
    Ok(total / n)
}

pub fn unseen_grad(student_k1_strong: &Matrix, weights: &[f64], mu_b: usize, k: usize) -> Result<Matrix> {
    let n = check_denominator(mu_b)?;
    check_rows("student predictions", student_k1_strong, weights.len())?;
    if student_k1_strong.cols() != k + 1 {
        return Err(DtsError::shape("unseen loss needs K+1 columns"));
    }
    let mut g = Matrix::zeros(student_k1_strong.rows(), k + 1);
    for (i, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let p = student_k1_strong.row(i);
        let dp: Vec<f64> = d_ce_dp(k + 1, p).iter().map(|v| v * w / n).collect();
        g.row_mut(i).copy_from_slice(&softmax_backward(p, &dp));
    }
    Ok(g)
}

/// Cross-entropy toward the uniform distribution, masked and
/// `muB`-normalized. Stands in for the unseen-class loss when the outlier
/// side has only a `K` head.
pub fn uniformity_loss(student_strong: &Matrix, mask: &[f64], mu_b: usize) -> Result<f64> {
    let n = check_denominator(mu_b)?;
    check_rows("student predictions", student_strong, mask.len())?;
    let target = vec![1.0 / student_strong.cols() as f64; student_strong.cols()];
    let mut total = 0.0;
    for (row, w) in student_strong.iter_rows().zip(mask) {
        total += cross_entropy_soft(&target, row)? * w;
    }
    Ok(total / n)
}

pub fn uniformity_grad(student_strong: &Matrix, mask: &[f64], mu_b: usize) -> Result<Matrix> {
    let n = check_denominator(mu_b)?;
    check_rows("student predictions", student_strong, mask.len())?;
    let c = student_strong.cols() as f64;
    let mut g = Matrix::zeros(student_strong.rows(), student_strong.cols());
    for (i, w) in mask.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let p = student_strong.row(i);
        let dp: Vec<f64> = p
            .iter()
            .map(|q| if *q >= LOG_CLAMP { -w / (c * q * n) } else { 0.0 })
            .collect();
        g.row_mut(i).copy_from_slice(&softmax_backward(p, &dp));
    }
    Ok(g)
}

/// `(1/muB) sum KL(p_weak_i, p_strong_i)`, ungated.
pub fn consistency_loss(weak: &Matrix, strong: &Matrix, mu_b: usize) -> Result<f64> {
    let n = check_denominator(mu_b)?;
    check_rows("strong-view predictions", strong, weak.rows())?;
    let mut total = 0.0;
    for (p, q) in weak.iter_rows().zip(strong.iter_rows()) {
        total += kl_divergence(p, q)?;
    }
    Ok(total / n)
}

/// Gradients with respect to the weak-view and strong-view logits.
pub fn consistency_grad(weak: &Matrix, strong: &Matrix, mu_b: usize) -> Result<(Matrix, Matrix)> {
    let n = check_denominator(mu_b)?;
    check_rows("strong-view predictions", strong, weak.rows())?;
    if weak.cols() != strong.cols() {
        return Err(DtsError::shape("weak and strong predictions differ in width"));
    }
    let mut gw = Matrix::zeros(weak.rows(), weak.cols());
    let mut gs = Matrix::zeros(strong.rows(), strong.cols());
    for i in 0..weak.rows() {
        let (p, q) = (weak.row(i), strong.row(i));
        let dp: Vec<f64> = d_kl_dp(p, q).iter().map(|v| v / n).collect();
        let dq: Vec<f64> = d_kl_dq(p, q).iter().map(|v| v / n).collect();
        gw.row_mut(i).copy_from_slice(&softmax_backward(p, &dp));
        gs.row_mut(i).copy_from_slice(&softmax_backward(q, &dq));
    }
    Ok((gw, gs))
}

pub fn inlier_objective(ce_k: f64, seen: f64, logit_match: f64, lambda_seen: f64, lambda_lm: f64) -> f64 {
    ce_k + lambda_seen * seen + lambda_lm * logit_match
}

pub fn outlier_objective(
    ce_k1: f64,
    seen: f64,
    unseen: f64,
    consistency: f64,
    lambda_seen: f64,
    lambda_unseen: f64,
    lambda_cr: f64,
) -> f64 {
    ce_k1 + lambda_seen * seen + lambda_unseen * unseen + lambda_cr * consistency
}

pub fn pretrain_objective(ce_k: f64, ce_k1: f64) -> f64 {
    ce_k + ce_k1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_seen: f64,
    pub lambda_lm: f64,
    pub lambda_unseen: f64,
    pub lambda_cr: f64,
}

/// Per-step (or per-epoch mean) decomposition of every loss term.
///
/// `seen` is the inlier student's pseudo-label loss and `seen_out` the
/// outlier student's; `unseen` holds the uniformity loss when the outlier
/// side runs without a `K+1` head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce_k: f64,
    pub ce_k1: f64,
    pub seen: f64,
    pub seen_out: f64,
    pub logit_match: f64,
    pub unseen: f64,
    pub consistency: f64,
    pub inlier_total: f64,
    pub outlier_total: f64,
    pub pretrain_total: f64,
    pub pass_count: usize,
    pub pass_count_out: usize,
    pub effective_weight_sum: f64,
}

impl LossReport {
    /// Recomputes the three totals from the components.
    pub fn with_totals(mut self, w: &LossWeights) -> Self {
        self.inlier_total = inlier_objective(self.ce_k, self.seen, self.logit_match, w.lambda_seen, w.lambda_lm);
        self.outlier_total = outlier_objective(
            self.ce_k1,
            self.seen_out,
            self.unseen,
            self.consistency,
            w.lambda_seen,
            w.lambda_unseen,
            w.lambda_cr,
        );
        self.pretrain_total = pretrain_objective(self.ce_k, self.ce_k1);
        self
    }

    /// Component-wise mean of several reports; counts are summed.
    pub fn mean(reports: &[LossReport], w: &LossWeights) -> LossReport {
        if reports.is_empty() {
            return LossReport::default();
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            ce_k: avg(|r| r.ce_k),
            ce_k1: avg(|r| r.ce_k1),
            seen: avg(|r| r.seen),
            seen_out: avg(|r| r.seen_out),
            logit_match: avg(|r| r.logit_match),
            unseen: avg(|r| r.unseen),
            consistency: avg(|r| r.consistency),
            pass_count: reports.iter().map(|r| r.pass_count).sum(),
            pass_count_out: reports.iter().map(|r| r.pass_count_out).sum(),
            effective_weight_sum: reports.iter().map(|r| r.effective_weight_sum).sum(),
            ..Default::default()
        }
        .with_totals(w)
    }
}
