//! Curriculum dual-prompt fine-tuning of the adapter bank and fusion
//! networks.

mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::error::{CkfError, Result};
use crate::fusion::FusionMode;
use crate::lm::BankMode;

pub use model::{batch_loss, prepare, BatchLoss, CkfModel, Context, ModelSpec, Prepared, RNG_KEY, STEP_KEY};
pub use train::{
    build_train_data, corpus_text_sequences, pretrain_on_corpus, train, EpochLog, StepLog, TrainData, TrainReport,
};

/// Which losses enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossForm {
    /// β·L_T1 + (1−β)·L_T2 + λ·L_orth.
    Curriculum,
    /// L_T1 + λ·L_orth; the injected prompt is never built.
    TextOnly,
    /// L_T2 + λ·L_orth.
    InjectedOnly,
}

/// Full model and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CKF")]
    Ckf,
    /// No collaborative knowledge.
    #[serde(rename = "NCK")]
    Nck,
    /// One linear map for users and items.
    #[serde(rename = "NPM")]
    Npm,
    /// Two linear maps.
    #[serde(rename = "TLM")]
    Tlm,
    /// One adapter set shared by every task.
    #[serde(rename = "NML")]
    Nml,
    /// No curriculum weighting.
    #[serde(rename = "NEN")]
    Nen,
    /// Single task per run.
    #[serde(rename = "S")]
    S,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub fusion: FusionMode,
    pub bank: BankMode,
    pub loss: LossForm,
    pub single_task: bool,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Ckf,
        Variant::Nck,
        Variant::Npm,
        Variant::Tlm,
        Variant::Nml,
        Variant::Nen,
        Variant::S,
    ];

    pub fn spec(self) -> VariantSpec {
        use BankMode as B;
        use FusionMode as F;
        use LossForm as L;
        let (fusion, bank, loss) = match self {
            Variant::Ckf | Variant::S => (F::MetaNetwork, B::MultiLora, L::Curriculum),
            Variant::Nck => (F::None, B::MultiLora, L::TextOnly),
            Variant::Npm => (F::SharedGeneric, B::MultiLora, L::Curriculum),
            Variant::Tlm => (F::SeparateGeneric, B::MultiLora, L::Curriculum),
            Variant::Nml => (F::MetaNetwork, B::SingleShared, L::Curriculum),
            Variant::Nen => (F::MetaNetwork, B::MultiLora, L::InjectedOnly),
        };
        VariantSpec {
            fusion,
            bank,
            loss,
            single_task: self == Variant::S,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ckf => "CKF",
            Variant::Nck => "NCK",
            Variant::Npm => "NPM",
            Variant::Tlm => "TLM",
            Variant::Nml => "NML",
            Variant::Nen => "NEN",
            Variant::S => "S",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CkfError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches("CKF-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CkfError::config("train.variant", format!("unknown variant {s:?}")))
    }
}

/// Smooth weight on the text-only loss, decaying over `z` planned steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub tau: f64,
    pub z: usize,
    /// Use 1/(1+exp(i/z − 1)/τ) instead of 1/(1+exp((i/z − 1)/τ)).
    pub literal: bool,
}

impl BetaSchedule {
    pub fn new(tau: f64, z: usize) -> Result<Self> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(CkfError::config("train.tau", format!("must be positive, got {tau}")));
        }
        if z == 0 {
            return Err(CkfError::contract("beta schedule needs at least one planned step"));
        }
        Ok(Self { tau, z, literal: false })
    }

    pub fn beta(&self, i: usize) -> f64 {
        let x = i as f64 / self.z as f64 - 1.0;
        if self.literal {
            1.0 / (1.0 + x.exp() / self.tau)
        } else {
            1.0 / (1.0 + (x / self.tau).exp())
        }
    }
}

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub tau: f64,
    pub literal_beta: bool,
    pub lambda_orth: f64,
    pub seed: u64,
    pub variant: Variant,
    pub tasks: Vec<Task>,
    /// Cap on train examples per user and task; `None` keeps all.
    pub max_per_user: Option<usize>,
    /// Cap on validation examples per task.
    pub max_valid: Option<usize>,
    /// Next-token pretraining of the backbone on corpus text before it is
    /// frozen; 0 skips it.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    /// Largest gradient L2 norm per step; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            epochs: 3,
            batch: 8,
            tau: 0.125,
            literal_beta: false,
            lambda_orth: 1.0,
            seed: 0,
            variant: Variant::Ckf,
            tasks: vec![Task::Rp, Task::Ctr, Task::TopK, Task::Explain],
            max_per_user: None,
            max_valid: None,
            pretrain_steps: 0,
            pretrain_lr: 3e-3,
            pretrain_batch: 8,
            clip_norm: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, msg: String| Err(CkfError::config(field, msg));
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("train.lr", format!("must be positive, got {}", self.lr));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(
                "train.weight_decay",
                format!("must be nonnegative, got {}", self.weight_decay),
            );
        }
        if self.epochs == 0 {
            return bad("train.epochs", "must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("train.batch", "must be at least 1".into());
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad("train.tau", format!("must be positive, got {}", self.tau));
        }
        if self.lambda_orth.is_nan() || self.lambda_orth < 0.0 {
            return bad(
                "train.lambda_orth",
                format!("must be nonnegative, got {}", self.lambda_orth),
            );
        }
        if self.tasks.is_empty() {
            return bad("train.tasks", "at least one task is required".into());
        }
        if self.variant.spec().single_task && self.tasks.len() != 1 {
            return bad(
                "train.tasks",
                format!("variant S trains exactly one task, got {:?}", self.tasks),
            );
        }
        if self.pretrain_steps > 0 && (self.pretrain_batch == 0 || self.pretrain_lr.is_nan() || self.pretrain_lr <= 0.0)
        {
            return bad("train.pretrain_lr", "pretraining needs a positive lr and batch".into());
        }
        Ok(())
    }

    pub fn schedule(&self, z: usize) -> Result<BetaSchedule> {
        let mut s = BetaSchedule::new(self.tau, z)?;
        s.literal = self.literal_beta;
        Ok(s)
    }
}

#[cfg(test)]
mod tests;
