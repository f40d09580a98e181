//! The pipeline commands behind the `ckf` binary. Every command reads its
//! inputs from and writes its outputs to one work directory.

pub mod ckpt;
mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use config::{Config, CorpusConfig, EvalSection, FusionSection};

use crate::collab::{train_cf, CfEmbeddings};
use crate::corpus::synthetic::{generate, to_ml_dat, SyntheticSpec};
use crate::corpus::{parse_interactions, Corpus, DatasetStats, Partition, Task};
use crate::error::{CkfError, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::fusion::{pool_or_self, side_vector, FusionMode, Side};
use crate::lm::init_backbone;
use crate::numerics::{Bindings, Tape};
use crate::rng::SplitMix64;
use crate::trainer::{build_train_data, pretrain_on_corpus, train, CkfModel, Context, ModelSpec, TrainReport};

pub const CORPUS_DIR: &str = "corpus";
pub const CF_CKPT: &str = "cf.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const MODEL_SPEC: &str = "model.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS: &str = "metrics.json";
pub const USER_CSV: &str = "user_embeddings.csv";
pub const ITEM_CSV: &str = "item_embeddings.csv";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CkfError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CkfError::io(dir, e))
}

/// Parses the configured input, filters, splits and writes `corpus/`.
pub fn cmd_build_corpus(cfg: &Config, out: &Path) -> Result<DatasetStats> {
    cfg.validate()?;
    let input = cfg
        .corpus
        .input
        .as_deref()
        .ok_or_else(|| CkfError::config("corpus.input", "no interaction file given"))?;
    let parsed = parse_interactions(input, cfg.corpus.format, cfg.corpus.items.as_deref())?;
    let corpus = Corpus::build(&parsed, &cfg.corpus.split_spec())?;
    corpus.save(&out.join(CORPUS_DIR))?;
    Ok(corpus.stats())
}

pub fn load_corpus(out: &Path) -> Result<Corpus> {
    Corpus::load(&out.join(CORPUS_DIR))
}

pub fn load_cf(out: &Path) -> Result<CfEmbeddings> {
    CfEmbeddings::from_params(&ckpt::load(&out.join(CF_CKPT), "train-cf")?)
}

/// Trains the CF tables on the train partition; returns the epoch losses.
pub fn cmd_train_cf(cfg: &Config, out: &Path) -> Result<Vec<f64>> {
    cfg.validate()?;
    let corpus = load_corpus(out)?;
    let rows: Vec<_> = corpus.partition_interactions(Partition::Train).cloned().collect();
    let (cf, losses) = train_cf(&rows, corpus.n_users(), corpus.n_items(), &cfg.cf)?;
    ckpt::save(&out.join(CF_CKPT), &cf.to_params())?;
    Ok(losses)
}

/// Tasks the corpus can supply; Explain needs comments.
fn usable_tasks(cfg: &Config, corpus: &Corpus) -> Vec<Task> {
    cfg.train
        .tasks
        .iter()
        .copied()
        .filter(|&t| {
            let ok = t != Task::Explain || corpus.has_comments();
            if !ok {
                log::warn!("corpus has no comments; skipping Explain");
            }
            ok
        })
        .collect()
}

/// Fine-tunes the model and writes the checkpoint, its spec and the step log.
pub fn cmd_train(cfg: &Config, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let corpus = load_corpus(out)?;
    let cf = load_cf(out)?;
    let mut tc = cfg.train.clone();
    tc.tasks = usable_tasks(cfg, &corpus);
    tc.validate()?;
    let mut lm = cfg.lm.clone();
    lm.vocab = corpus.vocab.len();
    let mut backbone = init_backbone(&lm, &mut SplitMix64::derive(tc.seed, "backbone"))?;
    if tc.pretrain_steps > 0 {
        let losses = pretrain_on_corpus(&mut backbone, &lm, &corpus, &tc)?;
        log::info!(
            "pretrained backbone: loss {:.4} -> {:.4}",
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    let spec = ModelSpec {
        lm,
        h: cfg.fusion.h,
        w2_std: cfg.fusion.w2_std,
        d_cf: cf.d_cf(),
        variant: tc.variant,
        tasks: tc.tasks.clone(),
    };
    let mut model = CkfModel::init(spec, Some(backbone), tc.seed)?;
    let ctx = Context {
        titles: &corpus.titles,
        vocab: &corpus.vocab,
        cf: &cf,
    };
    let data = build_train_data(&corpus, &ctx, &model, &tc, &cfg.example_options())?;
    log::info!("{} train / {} valid examples", data.train.len(), data.valid.len());
    let mut log_text = String::new();
    let report = train(&mut model, &data, &tc, |s| {
        log_text.push_str(&serde_json::to_string(s)?);
        log_text.push('\n');
        if s.step % 100 == 0 {
            log::info!("step {} {} loss {:.4}", s.step, s.task, s.total);
        }
        Ok(())
    })?;
    for e in &report.epochs {
        log_text.push_str(&serde_json::to_string(e)?);
        log_text.push('\n');
    }
    ckpt::save(
        &out.join(MODEL_CKPT),
        &model.checkpoint(report.steps as u64, report.rng_state)?,
    )?;
    write(
        &out.join(MODEL_SPEC),
        &(serde_json::to_string_pretty(&model.spec)? + "\n"),
    )?;
    write(&out.join(TRAIN_LOG), &log_text)?;
    Ok(report)
}

pub fn load_model(out: &Path) -> Result<CkfModel> {
    let spec_path = out.join(MODEL_SPEC);
    if !spec_path.exists() {
        return Err(CkfError::MissingArtifact {
            path: spec_path,
            command: "train",
        });
    }
    let text = std::fs::read_to_string(&spec_path).map_err(|e| CkfError::io(&spec_path, e))?;
    let spec: ModelSpec = serde_json::from_str(&text)?;
    let params = ckpt::load(&out.join(MODEL_CKPT), "train")?;
    Ok(CkfModel::from_checkpoint(spec, params)?.0)
}

/// Scores the trained model on the test partition and writes `metrics.json`.
pub fn cmd_evaluate(cfg: &Config, out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let corpus = load_corpus(out)?;
    let cf = load_cf(out)?;
    let model = load_model(out)?;
    let mut report = evaluate(&model, &corpus, &cf, &cfg.eval_options())?;
    report.config = serde_json::to_value(cfg)?;
    write(&out.join(METRICS), &report.to_json()?)?;
    Ok(report)
}

fn csv_rows(header: &str, rows: &[(u64, Vec<f64>)]) -> String {
    let mut s = String::from(header);
    for k in 0..rows.first().map_or(0, |r| r.1.len()) {
        let _ = write!(s, ",d{k}");
    }
    s.push('\n');
    for (id, v) in rows {
        let _ = write!(s, "{id}");
        for x in v {
            let _ = write!(s, ",{x:?}");
        }
        s.push('\n');
    }
    s
}

/// Writes the projected (token-space) vector of every user and item, keyed
/// by raw id. A user's mapping is pooled over their latest train items;
/// an item's mapping is generated from its own embedding.
pub fn cmd_export_embeddings(cfg: &Config, out: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let corpus = load_corpus(out)?;
    let cf = load_cf(out)?;
    let model = load_model(out)?;
    if model.fusion.mode == FusionMode::None {
        return Err(CkfError::config(
            "train.variant",
            format!("{} injects no collaborative vectors to export", model.spec.variant),
        ));
    }
    let mut history: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for it in corpus.partition_interactions(Partition::Train) {
        history
            .entry(it.user_id as usize)
            .or_default()
            .push(it.item_id as usize);
    }
    let mut tape = Tape::new();
    let b = Bindings::bind(&mut tape, &model.params, |_| false);
    let mut project = |side: Side, e: &[f64], hist: &[&[f64]]| -> Result<Vec<f64>> {
        let p = pool_or_self(e, hist)?;
        let v = side_vector(&mut tape, model.fusion.mode, side, e, &p, &b)?
            .ok_or_else(|| CkfError::contract("fusion mode produced no vector"))?;
        Ok(tape.value(v).data().to_vec())
    };
    let mut users = Vec::with_capacity(corpus.n_users());
    for u in 0..corpus.n_users() {
        let items = history.get(&u).map(Vec::as_slice).unwrap_or_default();
        let recent = &items[items.len().saturating_sub(cfg.corpus.history_limit)..];
        let hist: Vec<&[f64]> = recent.iter().map(|&v| cf.lookup_item(v)).collect::<Result<_>>()?;
        users.push((corpus.user_raw[u], project(Side::User, cf.lookup_user(u)?, &hist)?));
    }
    let mut items = Vec::with_capacity(corpus.n_items());
    for v in 0..corpus.n_items() {
        items.push((corpus.item_raw[v], project(Side::Item, cf.lookup_item(v)?, &[])?));
    }
    let (up, ip) = (out.join(USER_CSV), out.join(ITEM_CSV));
    write(&up, &csv_rows("user_id", &users))?;
    write(&ip, &csv_rows("item_id", &items))?;
    Ok((up, ip))
}

/// Writes a synthetic two-genre corpus as `ratings.dat` and `movies.dat`.
pub fn cmd_gen_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    ensure_dir(dir)?;
    let (ratings, movies) = to_ml_dat(&generate(spec));
    let (rp, mp) = (dir.join("ratings.dat"), dir.join("movies.dat"));
    write(&rp, &ratings)?;
    write(&mp, &movies)?;
    Ok((rp, mp))
}
