use std::collections::BTreeSet;

use log::info;
use serde::{Deserialize, Serialize};

use super::model::{batch_loss, prepare, CkfModel, Context, Prepared};
use super::TrainConfig;
use crate::corpus::{build_examples, Corpus, ExampleOptions, Partition, Sampler, Task};
use crate::error::{CkfError, Result};
use crate::lm::{pretrain_backbone, LmConfig, PretrainConfig};
use crate::numerics::{AdamW, AdamWConfig, Bindings, ParamStore, Tape, Tensor};
use crate::rng::SplitMix64;

/// Prepared train and validation examples for every task of the model.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<Prepared>,
    pub valid: Vec<Prepared>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub task: Task,
    pub beta: f64,
    pub loss_t1: Option<f64>,
    pub loss_t2: Option<f64>,
    pub loss_orth: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub rng_state: u64,
}

pub fn build_train_data(
    corpus: &Corpus,
    ctx: &Context<'_>,
    model: &CkfModel,
    cfg: &TrainConfig,
    opts: &ExampleOptions,
) -> Result<TrainData> {
    let mut data = TrainData::default();
    let train_opts = ExampleOptions {
        max_per_user: cfg.max_per_user,
        ..opts.clone()
    };
    for &task in &model.bank.tasks {
        for ex in build_examples(corpus, Partition::Train, task, &train_opts, Sampler::Uniform)? {
            data.train.push(prepare(model, ctx, &ex)?);
        }
        let mut valid = build_examples(corpus, Partition::Valid, task, opts, Sampler::Uniform)?;
        if let Some(cap) = cfg.max_valid {
            if valid.len() > cap {
                let mut rng = SplitMix64::derive(opts.seed, &format!("valid-cap-{}", task.name()));
                let mut keep = rng.sample_indices(valid.len(), cap);
                keep.sort_unstable();
                valid = keep.into_iter().map(|k| valid[k].clone()).collect();
            }
        }
        for ex in valid {
            data.valid.push(prepare(model, ctx, &ex)?);
        }
    }
    Ok(data)
}

/// Each user's train history rendered the way prompts list rated items,
/// in chunks of at most `chunk` entries, tokenized with BOS.
pub fn corpus_text_sequences(corpus: &Corpus, chunk: usize) -> Vec<Vec<usize>> {
    let parts = corpus.split.partition_of(corpus.interactions.len());
    let mut out = Vec::new();
    for seq in corpus.user_sequences() {
        let entries: Vec<String> = seq
            .iter()
            .filter(|&&i| parts[i] == Some(Partition::Train))
            .map(|&i| {
                let x = &corpus.interactions[i];
                format!("{} ( {} )", corpus.titles[x.item_id as usize], x.rating)
            })
            .collect();
        for c in entries.chunks(chunk.max(1)) {
            out.push(corpus.vocab.encode(&c.join(" , ")));
        }
    }
    out
}

/// Next-token pretraining of a fresh backbone on corpus text, before
/// adapters exist. Returns the per-step losses.
pub fn pretrain_on_corpus(
    backbone: &mut ParamStore,
    lm: &LmConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let seqs = corpus_text_sequences(corpus, 12);
    pretrain_backbone(
        backbone,
        lm,
        &seqs,
        &PretrainConfig {
            steps: cfg.pretrain_steps,
            batch: cfg.pretrain_batch,
            lr: cfg.pretrain_lr,
            seed: cfg.seed,
        },
    )
}

fn batches(data: &[Prepared], tasks: &[Task], size: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut queues: Vec<Vec<Vec<usize>>> = tasks
        .iter()
        .map(|&t| {
            let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].task == t).collect();
            rng.shuffle(&mut idx);
            idx.chunks(size).rev().map(<[usize]>::to_vec).collect()
        })
        .collect();
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for q in queues.iter_mut() {
            if let Some(b) = q.pop() {
                out.push(b);
            }
        }
        if out.len() == before {
            return out;
        }
    }
}

fn clip(grads: &mut [(String, Tensor)], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Mean per-example loss on `valid` of the prompt the model serves with.
fn validation_loss(model: &CkfModel, valid: &[Prepared]) -> Result<Option<f64>> {
    if valid.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for p in valid {
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &model.params, |_| false);
        let l = match p.injected_pair() {
            Some(pair) if model.injects() => {
                model.answer_loss(&mut tape, &b, p.task, &pair.0.ids, &p.answer, Some(pair))?
            }
            _ => model.answer_loss(&mut tape, &b, p.task, &p.text_only, &p.answer, None)?,
        };
        total += tape.value(l).item();
    }
    Ok(Some(total / valid.len() as f64))
}

/// Fine-tunes `model` in place and keeps the epoch with the lowest
/// validation loss. `on_step` sees every step's log record.
pub fn train(
    model: &mut CkfModel,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let tasks = model.bank.tasks.clone();
    if let Some(p) = data.train.iter().find(|p| !tasks.contains(&p.task)) {
        return Err(CkfError::Dispatch(format!("{} (model serves {tasks:?})", p.task)));
    }
    let per_epoch: usize = tasks
        .iter()
        .map(|&t| data.train.iter().filter(|p| p.task == t).count().div_ceil(cfg.batch))
        .sum();
    if per_epoch == 0 {
        return Err(CkfError::contract("no training examples"));
    }
    let sched = cfg.schedule(per_epoch * cfg.epochs)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = SplitMix64::derive(cfg.seed, "train");
    let trainable: Vec<(Task, BTreeSet<String>)> = tasks
        .iter()
        .map(|&t| Ok((t, model.trainable_for(t)?)))
        .collect::<Result<_>>()?;

    let mut step = 0;
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let plan = batches(&data.train, &tasks, cfg.batch, &mut rng);
        for idx in &plan {
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &data.train[i]).collect();
            let task = batch[0].task;
            let names = &trainable.iter().find(|(t, _)| *t == task).expect("task in bank").1;
            let mut tape = Tape::new();
            let b = Bindings::bind(&mut tape, &model.params, |n| names.contains(n));
            let beta = sched.beta(step);
            let bl = batch_loss(&mut tape, model, &b, &batch, beta, cfg.lambda_orth)?;
            let total = tape.value(bl.total).item();
            if !total.is_finite() {
                return Err(CkfError::Numeric(format!("loss {total} at step {step} ({task})")));
            }
            let grads = tape.backward(bl.total)?;
            let mut named: Vec<(String, Tensor)> = b
                .iter()
                .filter(|(n, _)| names.contains(*n))
                .filter_map(|(n, v)| grads.get(v).map(|g| (n.to_string(), g.clone())))
                .collect();
            clip(&mut named, cfg.clip_norm);
            opt.step(&mut model.params, named.iter().map(|(n, g)| (n.as_str(), g)), |n| {
                n.starts_with("lora.") || n.starts_with("fusion.")
            })?;
            on_step(&StepLog {
                step,
                task,
                beta,
                loss_t1: bl.loss_t1,
                loss_t2: bl.loss_t2,
                loss_orth: bl.loss_orth,
                total,
            })?;
            sum += total;
            step += 1;
        }
        let train_loss = sum / plan.len() as f64;
        let valid_loss = validation_loss(model, &data.valid)?;
        info!("epoch {epoch}: train {train_loss:.5} valid {valid_loss:?}");
        epochs.push(EpochLog {
            epoch,
            train_loss,
            valid_loss,
        });
        let better = match (valid_loss, &best) {
            (Some(v), Some((s, _, _))) => v < *s,
            _ => true,
        };
        if better {
            best = Some((valid_loss.unwrap_or(0.0), epoch, model.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainReport {
        steps: step,
        epochs,
        best_epoch,
        rng_state: rng.state(),
    })
}
