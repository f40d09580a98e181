use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collab::CfTrainConfig;
use crate::corpus::{ExampleOptions, InputFormat, SplitMode, SplitSpec};
use crate::error::{CkfError, Result};
use crate::eval::EvalOptions;
use crate::lm::LmConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub format: InputFormat,
    pub input: Option<PathBuf>,
    /// Titles file for `ml-dat` and `tsv` inputs.
    pub items: Option<PathBuf>,
    pub k_core: usize,
    pub k_core_iterative: bool,
    pub split: SplitMode,
    pub few_shot_n: Option<usize>,
    pub cold_user_fraction: Option<f64>,
    pub seed: u64,
    pub n_neg: usize,
    pub history_limit: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            format: InputFormat::MlDat,
            input: None,
            items: None,
            k_core: 20,
            k_core_iterative: false,
            split: SplitMode::LeaveOneOut,
            few_shot_n: None,
            cold_user_fraction: None,
            seed: 0,
            n_neg: 10,
            history_limit: 10,
        }
    }
}

impl CorpusConfig {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            mode: self.split,
            k_core: self.k_core,
            k_core_iterative: self.k_core_iterative,
            few_shot_n: self.few_shot_n,
            cold_user_fraction: self.cold_user_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub h: usize,
    pub w2_std: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { h: 8, w2_std: 0.02 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_examples: Option<usize>,
}

/// The whole experiment as one JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub cf: CfTrainConfig,
    pub lm: LmConfig,
    pub fusion: FusionSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        Self::from_value(v)
    }

    fn from_value(v: serde_json::Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| CkfError::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CkfError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies `section.key=value` overrides. The value is read as JSON
    /// when it parses, else as a string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| CkfError::config(s.clone(), "expected section.key=value"))?;
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| CkfError::config(key, "expected section.key"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let sec = v
                .get_mut(section)
                .and_then(|x| x.as_object_mut())
                .ok_or_else(|| CkfError::config(key, format!("unknown section {section:?}")))?;
            sec.insert(field.to_string(), value);
        }
        Self::from_value(v)
    }

    /// One seed for corpus sampling, CF training and LM training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.cf.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.split_spec().validate()?;
        if self.corpus.history_limit == 0 {
            return Err(CkfError::config("corpus.history_limit", "must be positive"));
        }
        self.cf.validate()?;
        self.lm.validate()?;
        if self.fusion.h == 0 {
            return Err(CkfError::config("fusion.h", "must be at least 1"));
        }
        self.train.validate()
    }

    pub fn example_options(&self) -> ExampleOptions {
        ExampleOptions {
            n_neg: self.corpus.n_neg,
            history_limit: self.corpus.history_limit,
            max_per_user: self.train.max_per_user,
            seed: self.corpus.seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_neg: self.corpus.n_neg,
            history_limit: self.corpus.history_limit,
            seed: self.corpus.seed,
            max_examples: self.eval.max_examples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Variant;

    fn field_of(r: Result<()>) -> String {
        match r {
            Err(CkfError::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn documented_defaults() {
        let c = Config::default();
        assert_eq!(c.corpus.k_core, 20);
        assert_eq!(c.corpus.n_neg, 10);
        assert_eq!(c.lm.rank, 16);
        assert_eq!(c.fusion.h, 8);
        assert_eq!(c.train.tau, 0.125);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.weight_decay, 1e-3);
        assert_eq!((c.train.epochs, c.train.batch), (3, 8));
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_documents() {
        let c = Config::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(Config::from_json(&text).unwrap(), c);
        let partial = Config::from_json(r#"{"train": {"epochs": 1}, "lm": {"rank": 4}}"#).unwrap();
        assert_eq!(partial.train.epochs, 1);
        assert_eq!(partial.lm.rank, 4);
        assert_eq!(partial.corpus.k_core, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            Config::from_json(r#"{"trian": {}}"#),
            Err(CkfError::Config { .. })
        ));
        assert!(matches!(
            Config::from_json(r#"{"train": {"learning_rate": 1}}"#),
            Err(CkfError::Config { .. })
        ));
        assert!(Config::default().with_overrides(&["lm.bogus=1".into()]).is_err());
        assert!(Config::default().with_overrides(&["nosection=1".into()]).is_err());
    }

    #[test]
    fn overrides_parse_json_then_string() {
        let c = Config::default()
            .with_overrides(&[
                "train.variant=NCK".into(),
                "train.tasks=[\"CTR\"]".into(),
                "lm.d_llm=16".into(),
                "corpus.format=tsv".into(),
                "eval.max_examples=5".into(),
            ])
            .unwrap();
        assert_eq!(c.train.variant, Variant::Nck);
        assert_eq!(c.train.tasks, vec![crate::corpus::Task::Ctr]);
        assert_eq!(c.lm.d_llm, 16);
        assert_eq!(c.corpus.format, InputFormat::Tsv);
        assert_eq!(c.eval.max_examples, Some(5));
    }

    #[test]
    fn validation_names_fields() {
        let bad = |s: &str| field_of(Config::default().with_overrides(&[s.into()]).unwrap().validate());
        assert_eq!(bad("train.tau=0"), "train.tau");
        assert_eq!(bad("train.tau=-1"), "train.tau");
        assert_eq!(bad("lm.rank=0"), "lm.rank");
        assert_eq!(bad("lm.d_llm=33"), "lm.d_llm");
        assert_eq!(bad("fusion.h=0"), "fusion.h");
    }

    #[test]
    fn seed_flag_reaches_every_stage() {
        let c = Config::default().with_seed(9);
        assert_eq!((c.corpus.seed, c.cf.seed, c.train.seed), (9, 9, 9));
    }
}
