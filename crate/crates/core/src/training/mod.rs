//! Two-stage post-training.

mod stage1;
mod stage2;

use serde::{Deserialize, Serialize};

pub use stage1::{
    evaluate_stage1, stage1_loss, stage1_loss_and_grad, targets_for, train_stage1, PatchCache, Stage1Config,
};
pub use stage2::{
    stage2_loss, stage2_loss_and_grad, train_stage2, FeatureCache, HeadInputs, Stage2Config, BCE_EPS,
};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Stage 2 only: validation accuracy of each head.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub head_val_acc: Vec<f64>,
    pub wall_ms: u64,
    pub seed: u64,
}

fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}
