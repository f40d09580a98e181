//! Constrained-answer scoring of a trained model and the ranking and
//! regression metrics.

mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use metrics::{
    auc, gar_baseline, hit_at_1, predict_click, predict_rating, regression_metrics, u_auc, Ranking, Regression,
};

use crate::collab::CfEmbeddings;
use crate::corpus::{build_examples, Corpus, ExampleOptions, Label, Partition, Sampler, Task, TaskExample};
use crate::error::{CkfError, Result};
use crate::numerics::{Bindings, Tape, Tensor};
use crate::trainer::{prepare, CkfModel, Context, Variant};

/// Softmax over the logits of `ids` only.
pub fn restricted_softmax(logits: &[f64], ids: &[usize]) -> Result<Vec<f64>> {
    let picked: Vec<f64> = ids
        .iter()
        .map(|&i| {
            logits.get(i).copied().ok_or_else(|| {
                CkfError::config(
                    "lm.vocab",
                    format!("answer token {i} outside a vocabulary of {}", logits.len()),
                )
            })
        })
        .collect::<Result<_>>()?;
    Ok(softmax(&picked))
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn log_softmax_at(row: &[f64], id: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row[id] - lse
}

/// Logits of `prompt ++ suffix` under the prompt form the model serves
/// with, computed without gradients.
fn score_logits(model: &CkfModel, ctx: &Context<'_>, ex: &TaskExample, suffix: &[usize]) -> Result<(Tensor, usize)> {
    let p = prepare(model, ctx, ex)?;
    let mut tape = Tape::new();
    let b = Bindings::bind(&mut tape, &model.params, |_| false);
    let (ids, injected) = match p.injected_pair() {
        Some(pair) => (&pair.0.ids, Some(pair)),
        None => (&p.text_only, None),
    };
    let l = model.logits(&mut tape, &b, ex.task, ids, suffix, injected)?;
    Ok((tape.value(l).clone(), ids.len()))
}

/// Distribution over the task's answer space: ratings 1..5, [yes, no], or
/// the candidate list (softmax of mean title-token log-probabilities).
pub fn answer_distribution(model: &CkfModel, ctx: &Context<'_>, ex: &TaskExample) -> Result<Vec<f64>> {
    match ex.task {
        Task::Rp | Task::Explain | Task::Ctr => {
            let (logits, n) = score_logits(model, ctx, ex, &[])?;
            let ids: Vec<usize> = if ex.task == Task::Ctr {
                vec![ctx.vocab.yes_id(), ctx.vocab.no_id()]
            } else {
                ctx.vocab.rating_ids().to_vec()
            };
            restricted_softmax(logits.row_slice(n - 1), &ids)
        }
        Task::TopK => {
            let mut scores = Vec::with_capacity(ex.candidates().len());
            for &c in ex.candidates() {
                let toks = ctx.vocab.tokenize(
                    ctx.titles
                        .get(c)
                        .ok_or_else(|| CkfError::contract(format!("item {c} has no title")))?,
                );
                if toks.is_empty() {
                    return Err(CkfError::contract(format!("item {c} has an empty title")));
                }
                let (logits, n) = score_logits(model, ctx, ex, &toks[..toks.len() - 1])?;
                let lp: f64 = toks
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| log_softmax_at(logits.row_slice(n - 1 + k), t))
                    .sum();
                scores.push(lp / toks.len() as f64);
            }
            Ok(softmax(&scores))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub n_neg: usize,
    pub history_limit: usize,
    pub seed: u64,
    /// Cap on test examples per task, for quick runs.
    pub max_examples: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_neg: 10,
            history_limit: 10,
            seed: 0,
            max_examples: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub examples: usize,
    #[serde(rename = "MAE", skip_serializing_if = "Option::is_none", default)]
    pub mae: Option<f64>,
    #[serde(rename = "MSE", skip_serializing_if = "Option::is_none", default)]
    pub mse: Option<f64>,
    #[serde(rename = "AUC", skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
    #[serde(rename = "U-AUC", skip_serializing_if = "Option::is_none", default)]
    pub u_auc: Option<f64>,
    #[serde(rename = "Hit@1-E", skip_serializing_if = "Option::is_none", default)]
    pub hit1_e: Option<f64>,
    #[serde(rename = "Hit@1-H", skip_serializing_if = "Option::is_none", default)]
    pub hit1_h: Option<f64>,
}

/// Test-set metrics per task, keyed by task name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub seed: u64,
    pub tasks: BTreeMap<String, TaskMetrics>,
    /// Global-average-rating baseline on the RP test set.
    #[serde(rename = "GAR", skip_serializing_if = "Option::is_none", default)]
    pub gar: Option<Regression>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn test_examples(corpus: &Corpus, task: Task, opts: &EvalOptions, sampler: Sampler<'_>) -> Result<Vec<TaskExample>> {
    let eo = ExampleOptions {
        n_neg: opts.n_neg,
        history_limit: opts.history_limit,
        max_per_user: None,
        seed: opts.seed,
    };
    let mut exs = build_examples(corpus, Partition::Test, task, &eo, sampler)?;
    if let Some(cap) = opts.max_examples {
        exs.truncate(cap);
    }
    Ok(exs)
}

fn rating_of(ex: &TaskExample) -> Result<f64> {
    match ex.label {
        Label::Rating(r) => Ok(r as f64),
        _ => Err(CkfError::contract("rating task without a rating label")),
    }
}

fn rankings(model: &CkfModel, ctx: &Context<'_>, exs: &[TaskExample]) -> Result<Vec<Ranking>> {
    exs.iter()
        .map(|ex| {
            let truth = match ex.label {
                Label::Item(v) => v,
                _ => return Err(CkfError::contract("top-k example without an item label")),
            };
            Ok(Ranking {
                candidates: ex.candidates().to_vec(),
                scores: answer_distribution(model, ctx, ex)?,
                truth,
            })
        })
        .collect()
}

/// Scores every task the model was trained on over the test partition.
pub fn evaluate(model: &CkfModel, corpus: &Corpus, cf: &CfEmbeddings, opts: &EvalOptions) -> Result<MetricsReport> {
    let ctx = Context {
        titles: &corpus.titles,
        vocab: &corpus.vocab,
        cf,
    };
    let mut report = MetricsReport {
        variant: model.spec.variant,
        seed: opts.seed,
        tasks: BTreeMap::new(),
        gar: None,
        config: serde_json::Value::Null,
    };
    for &task in &model.bank.tasks {
        let mut m = TaskMetrics::default();
        match task {
            Task::Rp | Task::Explain => {
                let exs = test_examples(corpus, task, opts, Sampler::Uniform)?;
                if exs.is_empty() {
                    continue;
                }
                let truths: Vec<f64> = exs.iter().map(rating_of).collect::<Result<_>>()?;
                let preds: Vec<f64> = exs
                    .iter()
                    .map(|ex| Ok(predict_rating(&answer_distribution(model, &ctx, ex)?)))
                    .collect::<Result<_>>()?;
                let r = regression_metrics(&preds, &truths)?;
                (m.examples, m.mae, m.mse) = (exs.len(), Some(r.mae), Some(r.mse));
                if task == Task::Rp {
                    let train: Vec<f64> = corpus
                        .partition_interactions(Partition::Train)
                        .map(|x| x.rating as f64)
                        .collect();
                    let g = gar_baseline(&train)?;
                    report.gar = Some(regression_metrics(&vec![g; truths.len()], &truths)?);
                }
            }
            Task::Ctr => {
                let exs = test_examples(corpus, task, opts, Sampler::Uniform)?;
                let mut by_user: BTreeMap<usize, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
                let (mut scores, mut labels) = (Vec::new(), Vec::new());
                for ex in &exs {
                    let s = predict_click(&answer_distribution(model, &ctx, ex)?);
                    let l = matches!(ex.label, Label::Click(true));
                    let g = by_user.entry(ex.user).or_default();
                    g.0.push(s);
                    g.1.push(l);
                    scores.push(s);
                    labels.push(l);
                }
                m.examples = exs.len();
                m.auc = Some(auc(&scores, &labels)?);
                m.u_auc = Some(u_auc(&by_user.into_values().collect::<Vec<_>>())?);
            }
            Task::TopK => {
                let easy = test_examples(corpus, task, opts, Sampler::Uniform)?;
                let hard = test_examples(corpus, task, opts, Sampler::Hard(cf))?;
                m.examples = easy.len();
                m.hit1_e = Some(hit_at_1(&rankings(model, &ctx, &easy)?)?);
                m.hit1_h = Some(hit_at_1(&rankings(model, &ctx, &hard)?)?);
            }
        }
        report.tasks.insert(task.name().to_string(), m);
    }
    Ok(report)
}
