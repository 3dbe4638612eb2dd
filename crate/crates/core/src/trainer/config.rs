use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{DtsError, Result};
use crate::losses::LossWeights;
use crate::models::{Activation, HeadKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_widths: vec![64],
            feature_dim: 32,
            activation: Activation::Relu,
        }
    }
}

/// Training hyperparameters. `Default` carries the published values;
/// [`TrainConfig::desk`] the small-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_seen: f64,
    pub lambda_lm: f64,
    pub lambda_unseen: f64,
    pub lambda_cr: f64,
    pub mu: usize,
    pub tau: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub epochs_per_iteration: usize,
    pub iterations: usize,
    pub pretrain_epochs: usize,
    /// Optimizer steps per epoch; `None` means `ceil(m / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine_decay: bool,
    pub ablation: AblationMode,
    /// Drop outlier-side pseudo-labels that land on the unseen class.
    pub exclude_k1_pseudo: bool,
    /// Score threshold replacing soft weights under `no_soft_weighting`.
    pub hard_weight_threshold: f64,
    /// `1 - max` threshold for the uniformity target under `no_k1_ots`.
    pub uniform_threshold: f64,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_seen: 0.25,
            lambda_lm: 0.25,
            lambda_unseen: 0.1,
            lambda_cr: 0.3,
            mu: 7,
            tau: 0.85,
            batch_size: 256,
            gamma: 0.5,
            epochs_per_iteration: 400,
            iterations: 3,
            pretrain_epochs: 1000,
            steps_per_epoch: None,
            lr: 0.128,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine_decay: false,
            ablation: AblationMode::Full,
            exclude_k1_pseudo: false,
            hard_weight_threshold: 0.85,
            uniform_threshold: 0.5,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 2 iterations of 20 epochs, B = 64, mu = 3,
    /// 50 pre-training epochs. The learning rate is 0.03 because the MLP
    /// backbone has no normalization layers and diverges at 0.128.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 0.03,
            iterations: 2,
            epochs_per_iteration: 20,
            batch_size: 64,
            mu: 3,
            pretrain_epochs: 50,
            ..Default::default()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.iterations * self.epochs_per_iteration
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_seen: self.lambda_seen,
            lambda_lm: self.lambda_lm,
            lambda_unseen: self.lambda_unseen,
            lambda_cr: self.lambda_cr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DtsError::Validation(msg));
        for (name, v) in [
            ("lambda_seen", self.lambda_seen),
            ("lambda_lm", self.lambda_lm),
            ("lambda_unseen", self.lambda_unseen),
            ("lambda_cr", self.lambda_cr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if self.iterations == 0 || self.epochs_per_iteration == 0 {
            return fail("iterations and epochs_per_iteration must be at least 1".into());
        }
        if self.batch_size == 0 || self.mu == 0 {
            return fail("batch_size and mu must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return fail("steps_per_epoch must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.model.feature_dim == 0 || self.model.hidden_widths.contains(&0) {
            return fail("model widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoIts,
    NoSoftWeighting,
    NoK1Its,
    NoK1Ots,
    NoLogitMatch,
    NoConsistency,
    OneFTwoC,
    OneFTwoCProj,
    SupervisedOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 10] = [
        AblationMode::Full,
        AblationMode::NoIts,
        AblationMode::NoSoftWeighting,
        AblationMode::NoK1Its,
        AblationMode::NoK1Ots,
        AblationMode::NoLogitMatch,
        AblationMode::NoConsistency,
        AblationMode::OneFTwoC,
        AblationMode::OneFTwoCProj,
        AblationMode::SupervisedOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoIts => "no_its",
            AblationMode::NoSoftWeighting => "no_soft_weighting",
            AblationMode::NoK1Its => "no_k1_its",
            AblationMode::NoK1Ots => "no_k1_ots",
            AblationMode::NoLogitMatch => "no_logit_match",
            AblationMode::NoConsistency => "no_consistency",
            AblationMode::OneFTwoC => "one_f_two_c",
            AblationMode::OneFTwoCProj => "one_f_two_c_proj",
            AblationMode::SupervisedOnly => "supervised_only",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = DtsError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let alias = match key.as_str() {
            "a1" => "no_logit_match",
            "a2" => "no_consistency",
            "onef_twoc" | "oneftwoc" => "one_f_two_c",
            "onef_twoc_proj" | "oneftwoc_prime" | "oneftwoc'" => "one_f_two_c_proj",
            other => other,
        };
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| DtsError::Validation(format!("unknown ablation mode {s:?}")))
    }
}

/// How the models are arranged for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Separate inlier and outlier teacher-student pairs.
    Dual,
    /// Only the outlier pair; classification reads its first `K` outputs.
    OutlierOnly,
    /// One teacher-student pair whose model carries both heads.
    Joint { projection: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenWeighting {
    /// Per-example weight equal to the uncertainty score.
    Soft,
    /// Weight 1 where the score exceeds the threshold, 0 elsewhere.
    Hard { threshold: f64 },
    /// No unseen-class output: push examples with `1 - max > threshold`
    /// toward a uniform `K`-way prediction.
    Uniform { threshold: f64 },
}

/// Effective training pipeline after applying an ablation mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub mode: AblationMode,
    pub structure: Structure,
    pub outlier_head: HeadKind,
    pub unseen_weighting: UnseenWeighting,
    pub its_gate_uses_score: bool,
    pub uses_unlabeled: bool,
    pub weights: LossWeights,
}

impl Pipeline {
    pub fn backbone_count(&self) -> usize {
        match self.structure {
            Structure::Dual => 2,
            Structure::OutlierOnly | Structure::Joint { .. } => 1,
        }
    }

    pub fn describe(&self) -> String {
        let structure = match self.structure {
            Structure::Dual => "inlier and outlier teacher-student pairs".to_string(),
            Structure::OutlierOnly => "outlier pair only, classifying with its first K outputs".to_string(),
            Structure::Joint { projection } => format!(
                "single dual-head teacher-student pair{}",
                if projection { " with a projection before the K+1 head" } else { "" }
            ),
        };
        let unseen = match self.unseen_weighting {
            UnseenWeighting::Soft => "soft score weights".to_string(),
            UnseenWeighting::Hard { threshold } => format!("hard mask at score > {threshold}"),
            UnseenWeighting::Uniform { threshold } => {
                format!("uniform target where 1 - max > {threshold}")
            }
        };
        let w = self.weights;
        format!(
            "{}: {}; outlier head {:?}; unseen signal: {}; inlier gate {}; unlabeled data {}; \
             lambda_seen={} lambda_lm={} lambda_unseen={} lambda_cr={}",
            self.mode,
            structure,
            self.outlier_head,
            unseen,
            if self.its_gate_uses_score { "threshold and score" } else { "threshold only" },
            if self.uses_unlabeled { "used" } else { "unused" },
            w.lambda_seen,
            w.lambda_lm,
            w.lambda_unseen,
            w.lambda_cr
        )
    }
}

pub fn apply_ablation(mode: AblationMode, config: &TrainConfig) -> Pipeline {
    let mut p = Pipeline {
        mode,
        structure: Structure::Dual,
        outlier_head: HeadKind::KPlusOne,
        unseen_weighting: UnseenWeighting::Soft,
        its_gate_uses_score: true,
        uses_unlabeled: true,
        weights: config.weights(),
    };
    match mode {
        AblationMode::Full => {}
        AblationMode::NoIts => p.structure = Structure::OutlierOnly,
        AblationMode::NoSoftWeighting => {
            p.unseen_weighting = UnseenWeighting::Hard {
                threshold: config.hard_weight_threshold,
            }
        }
        AblationMode::NoK1Its => p.its_gate_uses_score = false,
        AblationMode::NoK1Ots => {
            p.outlier_head = HeadKind::K;
            p.unseen_weighting = UnseenWeighting::Uniform {
                threshold: config.uniform_threshold,
            };
        }
        AblationMode::NoLogitMatch => p.weights.lambda_lm = 0.0,
        AblationMode::NoConsistency => p.weights.lambda_cr = 0.0,
        AblationMode::OneFTwoC => p.structure = Structure::Joint { projection: false },
        AblationMode::OneFTwoCProj => p.structure = Structure::Joint { projection: true },
        AblationMode::SupervisedOnly => {
            p.uses_unlabeled = false;
            p.weights = LossWeights {
                lambda_seen: 0.0,
                lambda_lm: 0.0,
                lambda_unseen: 0.0,
                lambda_cr: 0.0,
            };
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda_seen, c.lambda_lm, c.lambda_unseen, c.lambda_cr), (0.25, 0.25, 0.1, 0.3));
        assert_eq!((c.mu, c.tau, c.batch_size, c.gamma), (7, 0.85, 256, 0.5));
        assert_eq!((c.epochs_per_iteration, c.iterations, c.pretrain_epochs), (400, 3, 1000));
        assert_eq!((c.lr, c.momentum, c.weight_decay), (0.128, 0.9, 5e-4));
        assert_eq!(c.total_epochs(), 1200);
        c.validate().unwrap();
    }

    #[test]
    fn desk_schedule() {
        let c = TrainConfig::desk();
        assert_eq!((c.iterations, c.epochs_per_iteration, c.batch_size, c.mu, c.pretrain_epochs), (2, 20, 64, 3, 50));
        assert_eq!(c.lr, 0.03);
        c.validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = [
            TrainConfig { tau: 1.0, ..Default::default() },
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { lambda_cr: -0.1, ..Default::default() },
            TrainConfig { iterations: 0, ..Default::default() },
            TrainConfig { gamma: 1.2, ..Default::default() },
            TrainConfig { mu: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(DtsError::Validation(_))));
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert_eq!("A1".parse::<AblationMode>().unwrap(), AblationMode::NoLogitMatch);
        assert_eq!("A2".parse::<AblationMode>().unwrap(), AblationMode::NoConsistency);
        assert!(matches!("bogus".parse::<AblationMode>(), Err(DtsError::Validation(_))));
    }

    #[test]
    fn ablation_pipelines() {
        let c = TrainConfig::desk();
        assert_eq!(apply_ablation(AblationMode::NoLogitMatch, &c).weights.lambda_lm, 0.0);
        assert_eq!(apply_ablation(AblationMode::NoConsistency, &c).weights.lambda_cr, 0.0);
        assert_eq!(apply_ablation(AblationMode::OneFTwoC, &c).backbone_count(), 1);
        assert_eq!(apply_ablation(AblationMode::Full, &c).backbone_count(), 2);
        assert_eq!(
            apply_ablation(AblationMode::NoSoftWeighting, &c).unseen_weighting,
            UnseenWeighting::Hard { threshold: 0.85 }
        );
        let k1 = apply_ablation(AblationMode::NoK1Ots, &c);
        assert_eq!(k1.outlier_head, HeadKind::K);
        assert!(!apply_ablation(AblationMode::NoK1Its, &c).its_gate_uses_score);
        assert!(!apply_ablation(AblationMode::SupervisedOnly, &c).uses_unlabeled);
        assert!(apply_ablation(AblationMode::NoIts, &c).describe().contains("outlier pair only"));
    }
}
