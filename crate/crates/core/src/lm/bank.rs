use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::error::{CkfError, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankMode {
    /// Per-task adapters on q, one shared set on k/v/o.
    MultiLora,
    /// Every task owns adapters on all four projections.
    PerTaskFull,
    /// One adapter set on q/k/v/o used by every task.
    SingleShared,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
        }
    }
}

/// Parameter names of one adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterNames {
    pub a: String,
    pub b: String,
}

impl AdapterNames {
    fn new(prefix: String) -> Self {
        Self {
            a: format!("{prefix}.A"),
            b: format!("{prefix}.B"),
        }
    }
}

/// Adapter layout over all layers for a fixed task set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLoraBank {
    pub mode: BankMode,
    pub tasks: Vec<Task>,
    pub n_layers: usize,
}

impl MultiLoraBank {
    pub fn new(mode: BankMode, tasks: &[Task], n_layers: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(CkfError::config("train.tasks", "at least one task is required"));
        }
        let mut tasks = tasks.to_vec();
        tasks.sort();
        tasks.dedup();
        Ok(Self { mode, tasks, n_layers })
    }

    pub fn has_task(&self, task: Task) -> bool {
        self.tasks.contains(&task)
    }

    /// Adapter applied to `proj` of `layer` when running `task`.
    pub fn adapter(&self, layer: usize, proj: Proj, task: Task) -> Result<Option<AdapterNames>> {
        if !self.has_task(task) {
            return Err(CkfError::Dispatch(format!("{task} (bank serves {:?})", self.tasks)));
        }
        let p = proj.name();
        let t = task.index();
        Ok(match (self.mode, proj) {
            (BankMode::None, _) => None,
            (BankMode::MultiLora, Proj::Q) => Some(AdapterNames::new(format!("lora.task{t}.layer{layer}.q"))),
            (BankMode::MultiLora, _) | (BankMode::SingleShared, _) => {
                Some(AdapterNames::new(format!("lora.shared.layer{layer}.{p}")))
            }
            (BankMode::PerTaskFull, _) => Some(AdapterNames::new(format!("lora.task{t}.layer{layer}.{p}"))),
        })
    }

    /// Every adapter in the bank, deduplicated, in layer/projection order.
    pub fn all_adapters(&self) -> Vec<AdapterNames> {
        let mut out: Vec<AdapterNames> = Vec::new();
        for layer in 0..self.n_layers {
            for proj in Proj::ALL {
                for &task in &self.tasks {
                    if let Some(a) = self.adapter(layer, proj, task).expect("own task") {
                        if !out.contains(&a) {
                            out.push(a);
                        }
                    }
                }
            }
        }
        out
    }

    /// Adapters `task` touches.
    pub fn task_adapters(&self, task: Task) -> Result<Vec<AdapterNames>> {
        let mut out = Vec::new();
        for layer in 0..self.n_layers {
            for proj in Proj::ALL {
                if let Some(a) = self.adapter(layer, proj, task)? {
                    out.push(a);
                }
            }
        }
        Ok(out)
    }

    pub fn adapters_per_layer(&self) -> usize {
        self.all_adapters().len() / self.n_layers.max(1)
    }

    /// The q-side A matrix of each task at `layer`, when tasks own their q
    /// adapters.
    pub fn q_a_names(&self, layer: usize) -> Vec<(Task, String)> {
        match self.mode {
            BankMode::MultiLora | BankMode::PerTaskFull => self
                .tasks
                .iter()
                .map(|&t| (t, format!("lora.task{}.layer{layer}.q.A", t.index())))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Adds A ~ N(0, a_std²) and B = 0 for every adapter.
    pub fn init(&self, params: &mut ParamStore, d: usize, rank: usize, a_std: f64, rng: &mut SplitMix64) -> Result<()> {
        for ad in self.all_adapters() {
            params.insert(ad.a, Tensor::randn(&[d, rank], a_std, rng))?;
            params.insert(ad.b, Tensor::zeros(&[rank, d]))?;
        }
        Ok(())
    }
}
