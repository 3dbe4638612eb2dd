//! Shared-architecture models: the dual-head teacher and the inlier/outlier
//! teacher-student pairs derived from it.

mod dense;
mod network;

pub use dense::{Activation, Dense};
pub use network::{
    BackboneSpec, Checkpoint, ForwardPass, Gradients, HeadKind, Network, NetworkSpec, TensorData,
};

use serde::{Deserialize, Serialize};

use crate::error::{DtsError, Result};

/// Fresh dual-head teacher: backbone plus `K` and `K+1` heads.
pub fn init_teacher(backbone: BackboneSpec, num_classes: usize, seed: u64) -> Result<Network> {
    Network::new(NetworkSpec::dual(backbone, num_classes), seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// Backbone plus the `K` head.
    Inlier,
    /// Backbone plus the `K+1` head.
    Outlier,
    /// Backbone plus the `K` head, used where the outlier side runs without
    /// an unseen-class output.
    OutlierKHead,
    /// Backbone plus both heads in one model.
    Joint,
}

/// Teacher frozen within an iteration, student trained every step.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentPair {
    pub teacher: Network,
    pub student: Network,
    pub kind: PairKind,
}

impl TeacherStudentPair {
    /// Hard copy of the student into the teacher.
    pub fn refresh_teacher(&mut self) {
        self.teacher = self.student.clone();
    }

    /// Head that drives this pair's classification output.
    pub fn head(&self) -> HeadKind {
        match self.kind {
            PairKind::Inlier | PairKind::OutlierKHead => HeadKind::K,
            PairKind::Outlier | PairKind::Joint => HeadKind::KPlusOne,
        }
    }
}

/// Deep-copies the pre-trained teacher into a teacher-student pair.
pub fn derive_pair(teacher: &Network, kind: PairKind) -> Result<TeacherStudentPair> {
    if !teacher.is_pretrained() {
        return Err(DtsError::State(
            "cannot derive a teacher-student pair from an un-pre-trained teacher".into(),
        ));
    }
    let (keep_k, keep_k1) = match kind {
        PairKind::Inlier | PairKind::OutlierKHead => (true, false),
        PairKind::Outlier => (false, true),
        PairKind::Joint => (true, true),
    };
    let model = teacher.with_heads(keep_k, keep_k1)?;
    Ok(TeacherStudentPair {
        teacher: model.clone(),
        student: model,
        kind,
    })
}
