//! Teacher pre-training, the iterative teacher-student loop and per-epoch
//! evaluation.

mod config;
mod optim;

pub use config::{
    apply_ablation, AblationMode, ModelConfig, Pipeline, Structure, TrainConfig, UnseenWeighting,
};
pub use optim::Sgd;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentMode, Augmenter, BatchSampler, LabeledExample, MismatchSplit};
use crate::error::{DtsError, Result};
use crate::eval::{run_inference, EvalResult};
use crate::losses::{
    consistency_grad, consistency_loss, logit_match_grad, logit_match_loss, seen_grad, seen_loss,
    supervised_grad, supervised_loss, uniformity_grad, uniformity_loss, unseen_grad, unseen_loss,
    LossReport, LossWeights,
};
use crate::models::{
    derive_pair, init_teacher, BackboneSpec, HeadKind, Network, NetworkSpec, PairKind,
    TeacherStudentPair,
};
use crate::rng::{self, streams, DtsRng};
use crate::soft_weighting::{reliability_gate, teacher_signals, GateDecision, TeacherSignals};
use crate::tensor::{argmax, max_value, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub ce_k: f64,
    pub ce_k1: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based teacher iteration.
    pub iteration: usize,
    /// 0-based epoch counted across all iterations.
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub losses: LossReport,
    /// Fraction of unlabeled examples passing the inlier gate.
    pub gate_pass_rate: f64,
    /// Fraction of unlabeled examples passing the outlier gate.
    pub gate_pass_rate_out: f64,
    pub test_accuracy: f64,
    pub auroc: f64,
    pub mean_score_seen: f64,
    pub mean_score_unseen: f64,
    /// Cumulative count of unlabeled rows fed through any network.
    pub unlabeled_forwards: u64,
    pub teacher_in_hash: u64,
    pub teacher_out_hash: u64,
}

/// Trained networks for each structure.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModels {
    Dual {
        its: TeacherStudentPair,
        ots: TeacherStudentPair,
    },
    OutlierOnly {
        ots: TeacherStudentPair,
    },
    Joint {
        pair: TeacherStudentPair,
    },
}

impl TrainedModels {
    pub fn student_in(&self) -> &Network {
        match self {
            TrainedModels::Dual { its, .. } => &its.student,
            TrainedModels::OutlierOnly { ots } => &ots.student,
            TrainedModels::Joint { pair } => &pair.student,
        }
    }

    pub fn student_out(&self) -> &Network {
        match self {
            TrainedModels::Dual { ots, .. } | TrainedModels::OutlierOnly { ots } => &ots.student,
            TrainedModels::Joint { pair } => &pair.student,
        }
    }

    pub fn teacher_in(&self) -> &Network {
        match self {
            TrainedModels::Dual { its, .. } => &its.teacher,
            TrainedModels::OutlierOnly { ots } => &ots.teacher,
            TrainedModels::Joint { pair } => &pair.teacher,
        }
    }

    pub fn teacher_out(&self) -> &Network {
        match self {
            TrainedModels::Dual { ots, .. } | TrainedModels::OutlierOnly { ots } => &ots.teacher,
            TrainedModels::Joint { pair } => &pair.teacher,
        }
    }

    pub fn pairs(&self) -> Vec<&TeacherStudentPair> {
        match self {
            TrainedModels::Dual { its, ots } => vec![its, ots],
            TrainedModels::OutlierOnly { ots } => vec![ots],
            TrainedModels::Joint { pair } => vec![pair],
        }
    }

    /// Distinct backbones among the students.
    pub fn backbone_count(&self) -> usize {
        self.pairs().len()
    }

    fn refresh_teachers(&mut self) {
        match self {
            TrainedModels::Dual { its, ots } => {
                its.refresh_teacher();
                ots.refresh_teacher();
            }
            TrainedModels::OutlierOnly { ots } => ots.refresh_teacher(),
            TrainedModels::Joint { pair } => pair.refresh_teacher(),
        }
    }
}

/// Per-step snapshot handed to a [`TrainObserver`].
#[derive(Clone, Debug)]
pub struct StepInfo {
    pub iteration: usize,
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
    pub unlabeled_forwards: u64,
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _info: &StepInfo, _models: &TrainedModels) {}

    fn on_epoch(&mut self, _record: &EpochRecord, _models: &TrainedModels) -> Result<()> {
        Ok(())
    }

    /// Called after the teachers have been refreshed.
    fn on_iteration_end(&mut self, _iteration: usize, _models: &TrainedModels) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub pipeline: Pipeline,
    pub models: TrainedModels,
    pub pretrain_history: Vec<PretrainRecord>,
    pub history: Vec<EpochRecord>,
    pub final_eval: EvalResult,
}

fn rows_matrix<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<Matrix> {
    let rows: Vec<&[f64]> = rows.collect();
    Matrix::from_rows(&rows, dim)
}

fn augment_matrix(aug: &Augmenter, inputs: &[Vec<f64>], mode: AugmentMode, dim: usize, rng: &mut DtsRng) -> Result<Matrix> {
    let views = aug.augment_batch(inputs, mode, rng);
    rows_matrix(views.iter().map(|v| v.input.as_slice()), dim)
}

/// Fits the augmentation noise scale on every training input, labels unused.
pub fn fit_augmenter(config: &TrainConfig, split: &MismatchSplit) -> Augmenter {
    let inputs: Vec<&[f64]> = split
        .labeled
        .iter()
        .map(|e| e.input.as_slice())
        .chain(split.unlabeled.iter().map(|e| e.input.as_slice()))
        .collect();
    Augmenter::fit(config.augment.clone(), &inputs, split.image_shape)
}

/// Builds the initial dual-head teacher for `split`.
pub fn initial_teacher(config: &TrainConfig, pipeline: &Pipeline, split: &MismatchSplit) -> Result<Network> {
    let backbone = BackboneSpec {
        input_dim: split.dim,
        hidden_widths: config.model.hidden_widths.clone(),
        feature_dim: config.model.feature_dim,
        activation: config.model.activation,
    };
    let k = split.num_seen_classes();
    match pipeline.structure {
        Structure::Joint { projection: true } => Network::new(
            NetworkSpec {
                k1_projection: true,
                ..NetworkSpec::dual(backbone, k)
            },
            config.seed,
        ),
        _ => init_teacher(backbone, k, config.seed),
    }
}

/// Trains both heads of `teacher` on strong views of the labeled set with
/// the sum of the `K`-way and `(K+1)`-way cross-entropies, then marks it
/// pre-trained.
pub fn pretrain_teacher(
    teacher: &mut Network,
    labeled: &[LabeledExample],
    augmenter: &Augmenter,
    config: &TrainConfig,
    rng: &mut DtsRng,
) -> Result<Vec<PretrainRecord>> {
    if labeled.is_empty() {
        return Err(DtsError::validation("pre-training needs labeled examples"));
    }
    if !(teacher.has_head(HeadKind::K) && teacher.has_head(HeadKind::KPlusOne)) {
        return Err(DtsError::State("pre-training needs a dual-head teacher".into()));
    }
    let dim = teacher.spec().backbone.input_dim;
    let mut opt = Sgd::new(teacher, config.lr, config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let x_all = rows_matrix(labeled.iter().map(|e| e.input.as_slice()), dim)?;
    let y_all: Vec<usize> = labeled.iter().map(|e| e.label).collect();
    let mut history = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 0..config.pretrain_epochs {
        order.shuffle(rng);
        let (mut ce_k, mut ce_k1, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<Vec<f64>> = chunk.iter().map(|&i| labeled[i].input.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| labeled[i].label).collect();
            let x = augment_matrix(augmenter, &inputs, AugmentMode::Strong, dim, rng)?;
            let pass = teacher.forward_train(&x)?;
            let pk = pass.probs(HeadKind::K).expect("dual-head teacher");
            let pk1 = pass.probs(HeadKind::KPlusOne).expect("dual-head teacher");
            ce_k += supervised_loss(&labels, pk)?;
            ce_k1 += supervised_loss(&labels, pk1)?;
            let gk = supervised_grad(&labels, pk)?;
            let gk1 = supervised_grad(&labels, pk1)?;
            let grads = teacher.backward(&pass, Some(&gk), Some(&gk1));
            opt.step(teacher, &grads);
            batches += 1;
        }
        let n = batches as f64;
        let predictions: Vec<usize> = teacher
            .forward(&x_all, HeadKind::K)?
            .iter_rows()
            .map(|r| argmax(r) + 1)
            .collect();
        let correct = predictions.iter().zip(&y_all).filter(|(p, y)| p == y).count();
        history.push(PretrainRecord {
            epoch,
            ce_k: ce_k / n,
            ce_k1: ce_k1 / n,
            loss: (ce_k + ce_k1) / n,
            train_accuracy: correct as f64 / labeled.len() as f64,
        });
        if !(ce_k + ce_k1).is_finite() {
            return Err(DtsError::State(format!("pre-training diverged at epoch {epoch}")));
        }
    }
    teacher.mark_pretrained();
    Ok(history)
}

/// Pseudo-labels, gates and unseen-class weights derived from the frozen
/// teachers for one batch of weak views.
struct Targets {
    signals: TeacherSignals,
    pseudo_in: Vec<usize>,
    gates_in: Vec<GateDecision>,
    pseudo_out: Vec<usize>,
    gates_out: Vec<GateDecision>,
    unseen_weights: Vec<f64>,
}

fn build_targets(signals: TeacherSignals, pipeline: &Pipeline, config: &TrainConfig) -> Targets {
    let k = signals.p_its.cols();
    let mut t = Targets {
        pseudo_in: Vec::new(),
        gates_in: Vec::new(),
        pseudo_out: Vec::new(),
        gates_out: Vec::new(),
        unseen_weights: Vec::new(),
        signals,
    };
    for (i, s) in t.signals.scores.iter().enumerate() {
        let p_its = t.signals.p_its.row(i);
        let p_ots = t.signals.p_ots.row(i);
        let in_score = if pipeline.its_gate_uses_score { s.value } else { f64::NEG_INFINITY };
        t.gates_in.push(reliability_gate(p_its, in_score, config.tau));
        t.pseudo_in.push(argmax(p_its) + 1);

        let pseudo = argmax(p_ots) + 1;
        let mut gate = reliability_gate(p_ots, s.value, config.tau);
        if config.exclude_k1_pseudo && pseudo == k + 1 {
            gate.passed = false;
        }
        t.gates_out.push(gate);
        t.pseudo_out.push(pseudo);

        t.unseen_weights.push(match pipeline.unseen_weighting {
            UnseenWeighting::Soft => s.value,
            UnseenWeighting::Hard { threshold } => f64::from(u8::from(s.value > threshold)),
            UnseenWeighting::Uniform { threshold } => {
                f64::from(u8::from(1.0 - max_value(p_ots) > threshold))
            }
        });
    }
    t
}

/// Row layout of a student forward batch: `b` labeled strong views, then
/// `mu_b` unlabeled strong views, then `mu_b` unlabeled weak views.
#[derive(Clone, Copy)]
struct Layout {
    b: usize,
    mu_b: usize,
}

impl Layout {
    fn rows(&self) -> usize {
        self.b + 2 * self.mu_b
    }

    fn labeled(&self, m: &Matrix) -> Matrix {
        m.slice_rows(0, self.b)
    }

    fn strong(&self, m: &Matrix) -> Matrix {
        m.slice_rows(self.b, self.b + self.mu_b)
    }

    fn weak(&self, m: &Matrix) -> Matrix {
        m.slice_rows(self.b + self.mu_b, self.rows())
    }
}

fn place(dst: &mut Matrix, start: usize, src: &Matrix, scale: f64) {
    for i in 0..src.rows() {
        for (d, s) in dst.row_mut(start + i).iter_mut().zip(src.row(i)) {
            *d += scale * s;
        }
    }
}

/// Inlier objective on `K`-head probabilities; returns dL/dlogits. Terms
/// with zero weight are skipped and report 0.
fn inlier_terms(
    probs: &Matrix,
    labels: &[usize],
    layout: Layout,
    targets: Option<&Targets>,
    w: &LossWeights,
    report: &mut LossReport,
) -> Result<Matrix> {
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    let pl = layout.labeled(probs);
    report.ce_k = supervised_loss(labels, &pl)?;
    place(&mut g, 0, &supervised_grad(labels, &pl)?, 1.0);
    if let Some(t) = targets {
        let ps = layout.strong(probs);
        report.pass_count = t.gates_in.iter().filter(|g| g.passed).count();
        if w.lambda_seen != 0.0 {
            report.seen = seen_loss(&t.pseudo_in, &ps, &t.gates_in, layout.mu_b)?;
            place(&mut g, layout.b, &seen_grad(&t.pseudo_in, &ps, &t.gates_in, layout.mu_b)?, w.lambda_seen);
        }
        if w.lambda_lm != 0.0 {
            report.logit_match = logit_match_loss(&ps, &t.signals.p_its, &t.gates_in, layout.mu_b)?;
            let glm = logit_match_grad(&ps, &t.signals.p_its, &t.gates_in, layout.mu_b)?;
            place(&mut g, layout.b, &glm, w.lambda_lm);
        }
    }
    Ok(g)
}

/// Outlier objective on the outlier head's probabilities (`K+1` columns, or
/// `K` under the uniform-target variant); returns dL/dlogits. Terms with
/// zero weight are skipped and report 0.
fn outlier_terms(
    probs: &Matrix,
    labels: &[usize],
    layout: Layout,
    targets: Option<&Targets>,
    pipeline: &Pipeline,
    k: usize,
    report: &mut LossReport,
) -> Result<Matrix> {
    let w = &pipeline.weights;
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    let pl = layout.labeled(probs);
    report.ce_k1 = supervised_loss(labels, &pl)?;
    place(&mut g, 0, &supervised_grad(labels, &pl)?, 1.0);
    if let Some(t) = targets {
        let (ps, pw) = (layout.strong(probs), layout.weak(probs));
        let mu_b = layout.mu_b;
        report.pass_count_out = t.gates_out.iter().filter(|g| g.passed).count();
        report.effective_weight_sum = t.unseen_weights.iter().sum();
        if w.lambda_seen != 0.0 {
            report.seen_out = seen_loss(&t.pseudo_out, &ps, &t.gates_out, mu_b)?;
            place(&mut g, layout.b, &seen_grad(&t.pseudo_out, &ps, &t.gates_out, mu_b)?, w.lambda_seen);
        }
        if w.lambda_unseen != 0.0 {
            let gu = match pipeline.unseen_weighting {
                UnseenWeighting::Uniform { .. } => {
                    report.unseen = uniformity_loss(&ps, &t.unseen_weights, mu_b)?;
                    uniformity_grad(&ps, &t.unseen_weights, mu_b)?
                }
                _ => {
                    report.unseen = unseen_loss(&ps, &t.unseen_weights, mu_b, k)?;
                    unseen_grad(&ps, &t.unseen_weights, mu_b, k)?
                }
            };
            place(&mut g, layout.b, &gu, w.lambda_unseen);
        }
        if w.lambda_cr != 0.0 {
            report.consistency = consistency_loss(&pw, &ps, mu_b)?;
            let (gw, gs) = consistency_grad(&pw, &ps, mu_b)?;
            place(&mut g, layout.b, &gs, w.lambda_cr);
            place(&mut g, layout.b + mu_b, &gw, w.lambda_cr);
        }
    }
    Ok(g)
}

fn head_probs(pass: &crate::models::ForwardPass, head: HeadKind) -> Result<&Matrix> {
    pass.probs(head)
        .ok_or_else(|| DtsError::State(format!("student has no {head:?} head")))
}

/// Mutable state of a training run between iterations.
pub struct TrainState {
    pub config: TrainConfig,
    pub pipeline: Pipeline,
    pub models: TrainedModels,
    pub pretrain_history: Vec<PretrainRecord>,
    pub history: Vec<EpochRecord>,
    pub iteration: usize,
    pub unlabeled_forwards: u64,
    augmenter: Augmenter,
    sampler: BatchSampler,
    aug_rng: DtsRng,
    optimizers: Vec<Sgd>,
    steps_per_epoch: usize,
    global_step: usize,
}

impl TrainState {
    /// Initializes and pre-trains the teacher, then derives the
    /// teacher-student pairs required by the configured ablation.
    pub fn new(config: TrainConfig, split: &MismatchSplit) -> Result<Self> {
        config.validate()?;
        let pipeline = apply_ablation(config.ablation, &config);
        let augmenter = fit_augmenter(&config, split);
        let mut teacher = initial_teacher(&config, &pipeline, split)?;
        let mut pre_rng = rng::stream(config.seed, streams::PRETRAIN);
        let pretrain_history =
            pretrain_teacher(&mut teacher, &split.labeled, &augmenter, &config, &mut pre_rng)?;
        Self::from_teacher(config, split, &teacher, pretrain_history)
    }

    pub fn from_teacher(
        config: TrainConfig,
        split: &MismatchSplit,
        teacher: &Network,
        pretrain_history: Vec<PretrainRecord>,
    ) -> Result<Self> {
        config.validate()?;
        if split.test.is_empty() || split.unlabeled.is_empty() {
            return Err(DtsError::validation("training needs non-empty unlabeled and test sets"));
        }
        if teacher.spec().backbone.input_dim != split.dim {
            return Err(DtsError::shape(format!(
                "teacher expects {} features, split has {}",
                teacher.spec().backbone.input_dim,
                split.dim
            )));
        }
        let pipeline = apply_ablation(config.ablation, &config);
        let models = match pipeline.structure {
            Structure::Dual => {
                let ots_kind = match pipeline.outlier_head {
                    HeadKind::KPlusOne => PairKind::Outlier,
                    HeadKind::K => PairKind::OutlierKHead,
                };
                TrainedModels::Dual {
                    its: derive_pair(teacher, PairKind::Inlier)?,
                    ots: derive_pair(teacher, ots_kind)?,
                }
            }
            Structure::OutlierOnly => TrainedModels::OutlierOnly {
                ots: derive_pair(teacher, PairKind::Outlier)?,
            },
            Structure::Joint { .. } => TrainedModels::Joint {
                pair: derive_pair(teacher, PairKind::Joint)?,
            },
        };
        let optimizers = models
            .pairs()
            .iter()
            .map(|p| Sgd::new(&p.student, config.lr, config.momentum, config.weight_decay))
            .collect();
        let sampler = BatchSampler::new(split, config.batch_size, config.mu, config.seed)?;
        let steps_per_epoch = config
            .steps_per_epoch
            .unwrap_or_else(|| split.labeled.len().div_ceil(config.batch_size));
        Ok(TrainState {
            augmenter: fit_augmenter(&config, split),
            aug_rng: rng::stream(config.seed, streams::AUGMENT),
            config,
            pipeline,
            models,
            pretrain_history,
            history: Vec::new(),
            iteration: 0,
            unlabeled_forwards: 0,
            sampler,
            optimizers,
            steps_per_epoch,
            global_step: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    fn learning_rate(&self) -> f64 {
        if !self.config.cosine_decay {
            return self.config.lr;
        }
        let total = (self.steps_per_epoch * self.config.total_epochs()) as f64;
        let t = self.global_step as f64 / total;
        self.config.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    fn step(&mut self, split: &MismatchSplit) -> Result<LossReport> {
        let lr = self.learning_rate();
        for opt in &mut self.optimizers {
            opt.lr = lr;
        }
        let dim = split.dim;
        let k = split.num_seen_classes();
        let mut report = LossReport::default();
        let uses_unlabeled = self.pipeline.uses_unlabeled;

        let (labeled_inputs, labels, unlabeled_inputs) = if uses_unlabeled {
            let batch = self.sampler.next_batch_pair(split)?;
            (batch.labeled_inputs, batch.labels, batch.unlabeled_inputs)
        } else {
            let (x, y) = self.sampler.next_labeled(split);
            (x, y, Vec::new())
        };
        let layout = Layout {
            b: labels.len(),
            mu_b: unlabeled_inputs.len(),
        };
        let rng = &mut self.aug_rng;
        let x_l = augment_matrix(&self.augmenter, &labeled_inputs, AugmentMode::Strong, dim, rng)?;
        let (x, targets) = if uses_unlabeled {
            let weak = augment_matrix(&self.augmenter, &unlabeled_inputs, AugmentMode::Weak, dim, rng)?;
            let strong = augment_matrix(&self.augmenter, &unlabeled_inputs, AugmentMode::Strong, dim, rng)?;
            let signals = teacher_signals(
                self.models.teacher_in(),
                self.models.teacher_out(),
                &weak,
                self.config.gamma,
            )?;
            let teachers = if matches!(self.models, TrainedModels::Dual { .. }) { 2 } else { 1 };
            self.unlabeled_forwards += (teachers * layout.mu_b) as u64;
            let x = x_l.vstack(&strong)?.vstack(&weak)?;
            (x, Some(build_targets(signals, &self.pipeline, &self.config)))
        } else {
            (x_l, None)
        };
        let targets = targets.as_ref();
        let students = self.models.backbone_count() as u64;
        self.unlabeled_forwards += students * 2 * layout.mu_b as u64;

        let pipeline = &self.pipeline;
        match &mut self.models {
            TrainedModels::Dual { its, ots } => {
                let pass = its.student.forward_train(&x)?;
                let g = inlier_terms(head_probs(&pass, HeadKind::K)?, &labels, layout, targets, &pipeline.weights, &mut report)?;
                let grads = its.student.backward(&pass, Some(&g), None);
                self.optimizers[0].step(&mut its.student, &grads);

                let head = pipeline.outlier_head;
                let pass = ots.student.forward_train(&x)?;
                let g = outlier_terms(head_probs(&pass, head)?, &labels, layout, targets, pipeline, k, &mut report)?;
                let grads = match head {
                    HeadKind::K => ots.student.backward(&pass, Some(&g), None),
                    HeadKind::KPlusOne => ots.student.backward(&pass, None, Some(&g)),
                };
                self.optimizers[1].step(&mut ots.student, &grads);
            }
            TrainedModels::OutlierOnly { ots } => {
                let pass = ots.student.forward_train(&x)?;
                let g = outlier_terms(head_probs(&pass, HeadKind::KPlusOne)?, &labels, layout, targets, pipeline, k, &mut report)?;
                let grads = ots.student.backward(&pass, None, Some(&g));
                self.optimizers[0].step(&mut ots.student, &grads);
            }
            TrainedModels::Joint { pair } => {
                let pass = pair.student.forward_train(&x)?;
                let gk = inlier_terms(head_probs(&pass, HeadKind::K)?, &labels, layout, targets, &pipeline.weights, &mut report)?;
                let gk1 = outlier_terms(head_probs(&pass, HeadKind::KPlusOne)?, &labels, layout, targets, pipeline, k, &mut report)?;
                let grads = pair.student.backward(&pass, Some(&gk), Some(&gk1));
                self.optimizers[0].step(&mut pair.student, &grads);
            }
        }
        self.global_step += 1;
        let report = report.with_totals(&self.pipeline.weights);
        if !(report.inlier_total.is_finite() && report.outlier_total.is_finite()) {
            return Err(DtsError::State(format!("non-finite loss at step {}", self.global_step)));
        }
        Ok(report)
    }

    pub fn evaluate(&self, split: &MismatchSplit) -> Result<EvalResult> {
        run_inference(
            self.models.student_in(),
            self.models.student_out(),
            &split.test,
            &split.unlabeled,
            split.hidden_flags(),
            self.config.gamma,
        )
    }

    fn run_epoch(&mut self, split: &MismatchSplit, observer: &mut dyn TrainObserver) -> Result<EpochRecord> {
        let epoch = self.history.len();
        let lr = self.learning_rate();
        let mut reports = Vec::with_capacity(self.steps_per_epoch);
        for step in 0..self.steps_per_epoch {
            let report = self.step(split)?;
            observer.on_step(
                &StepInfo {
                    iteration: self.iteration,
                    epoch,
                    step,
                    report,
                    unlabeled_forwards: self.unlabeled_forwards,
                },
                &self.models,
            );
            reports.push(report);
        }
        let eval = self.evaluate(split)?;
        let losses = LossReport::mean(&reports, &self.pipeline.weights);
        let unlabeled_seen = (self.steps_per_epoch * self.config.batch_size * self.config.mu) as f64;
        let rate = |count: usize| {
            if self.pipeline.uses_unlabeled {
                count as f64 / unlabeled_seen
            } else {
                0.0
            }
        };
        let record = EpochRecord {
            iteration: self.iteration,
            epoch,
            steps: self.steps_per_epoch,
            learning_rate: lr,
            gate_pass_rate: rate(losses.pass_count),
            gate_pass_rate_out: rate(losses.pass_count_out),
            losses,
            test_accuracy: eval.accuracy,
            auroc: eval.auroc,
            mean_score_seen: eval.mean_score_seen,
            mean_score_unseen: eval.mean_score_unseen,
            unlabeled_forwards: self.unlabeled_forwards,
            teacher_in_hash: self.models.teacher_in().param_hash(),
            teacher_out_hash: self.models.teacher_out().param_hash(),
        };
        observer.on_epoch(&record, &self.models)?;
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn finish(self, split: &MismatchSplit) -> Result<TrainOutcome> {
        let final_eval = self.evaluate(split)?;
        Ok(TrainOutcome {
            pipeline: self.pipeline,
            models: self.models,
            pretrain_history: self.pretrain_history,
            history: self.history,
            final_eval,
        })
    }
}

/// Runs one teacher iteration: `epochs_per_iteration` epochs of student
/// updates against frozen teachers, then a hard refresh of every teacher
/// from its student.
pub fn train_dts_iteration(
    state: &mut TrainState,
    split: &MismatchSplit,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochRecord>> {
    if state.iteration >= state.config.iterations {
        return Err(DtsError::State("all teacher iterations already completed".into()));
    }
    let mut records = Vec::with_capacity(state.config.epochs_per_iteration);
    for _ in 0..state.config.epochs_per_iteration {
        records.push(state.run_epoch(split, observer)?);
    }
    state.models.refresh_teachers();
    observer.on_iteration_end(state.iteration, &state.models)?;
    state.iteration += 1;
    Ok(records)
}

pub fn run_training(config: &TrainConfig, split: &MismatchSplit) -> Result<TrainOutcome> {
    run_training_with(config, split, &mut NoopObserver)
}

pub fn run_training_with(
    config: &TrainConfig,
    split: &MismatchSplit,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let mut state = TrainState::new(config.clone(), split)?;
    while state.iteration < config.iterations {
        train_dts_iteration(&mut state, split, observer)?;
    }
    state.finish(split)
}
