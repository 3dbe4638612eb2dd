//! Safe semi-supervised classification under class mismatch with a pair of
//! diverse teacher-student models.
//!
//! An inlier pair learns the seen classes from reliable pseudo-labels while an
//! outlier pair learns an extra unseen-class output from soft uncertainty
//! weights. Both pairs start from one pre-trained dual-head teacher.

pub mod benchmark;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod rng;
pub mod soft_weighting;
pub mod tensor;
pub mod trainer;

pub use benchmark::Benchmark;
pub use data::{
    build_mismatch_split, generate_synthetic, Dataset, MismatchSplit, SplitManifest, SyntheticSpec,
};
pub use error::{DtsError, Result};
pub use eval::{compute_accuracy, compute_auroc, run_inference, EvalResult};
pub use losses::{LossReport, LossWeights};
pub use models::{derive_pair, init_teacher, HeadKind, Network, PairKind, TeacherStudentPair};
pub use soft_weighting::{reliability_gate, uncertainty_score, GateDecision, UncertaintyScore};
pub use tensor::Matrix;
pub use trainer::{
    apply_ablation, run_training, run_training_with, AblationMode, EpochRecord, TrainConfig,
    TrainOutcome, TrainedModels,
};
