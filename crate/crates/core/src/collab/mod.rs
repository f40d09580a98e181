//! Collaborative-filtering backends producing the user and item embedding
//! tables, plus cosine nearest-neighbour lookup.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, NeighborSource};
use crate::error::{CkfError, Result};
use crate::numerics::{AdamW, AdamWConfig, ParamStore, Tape, Tensor, Var};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CfBackend {
    #[serde(rename = "MF")]
    Mf,
    #[serde(rename = "SeqAttn")]
    SeqAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CfObjective {
    ImplicitBce,
    RatingMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfTrainConfig {
    pub backend: CfBackend,
    pub objective: CfObjective,
    pub d_cf: usize,
    pub lr: f64,
    pub epochs: usize,
    pub negatives: usize,
    pub batch: usize,
    pub init_std: f64,
    pub history_limit: usize,
    pub seed: u64,
}

impl Default for CfTrainConfig {
    fn default() -> Self {
        Self {
            backend: CfBackend::Mf,
            objective: CfObjective::ImplicitBce,
            d_cf: 64,
            lr: 1e-2,
            epochs: 20,
            negatives: 1,
            batch: 256,
            init_std: 0.1,
            history_limit: 10,
            seed: 0,
        }
    }
}

impl CfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_cf == 0 {
            return Err(CkfError::config("cf.d_cf", "must be positive"));
        }
        if self.objective == CfObjective::ImplicitBce && self.negatives == 0 {
            return Err(CkfError::config(
                "cf.negatives",
                "implicit-bce needs at least one negative",
            ));
        }
        if self.batch == 0 {
            return Err(CkfError::config("cf.batch", "must be positive"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(CkfError::config("cf.lr", "must be positive"));
        }
        Ok(())
    }
}

pub const USER_TABLE: &str = "cf.user_table";
pub const ITEM_TABLE: &str = "cf.item_table";

/// Frozen embedding tables. The user table has one extra trailing row, the
/// mean of all trained user rows, which also replaces the rows of users
/// that never appeared in training.
#[derive(Debug, Clone, PartialEq)]
pub struct CfEmbeddings {
    user_table: Tensor,
    item_table: Tensor,
}

impl CfEmbeddings {
    pub fn new(user_table: Tensor, item_table: Tensor) -> Result<Self> {
        if user_table.cols() != item_table.cols() || user_table.shape().len() != 2 || item_table.shape().len() != 2 {
            return Err(CkfError::Dimension {
                op: "CfEmbeddings::new",
                left: user_table.shape().to_vec(),
                right: item_table.shape().to_vec(),
            });
        }
        if !user_table.all_finite() || !item_table.all_finite() {
            return Err(CkfError::Numeric("non-finite embedding row".into()));
        }
        Ok(Self { user_table, item_table })
    }

    pub fn d_cf(&self) -> usize {
        self.item_table.cols()
    }

    /// Number of real users (excluding the reserved mean row).
    pub fn n_users(&self) -> usize {
        self.user_table.rows() - 1
    }

    pub fn n_items(&self) -> usize {
        self.item_table.rows()
    }

    pub fn user_table(&self) -> &Tensor {
        &self.user_table
    }

    pub fn item_table(&self) -> &Tensor {
        &self.item_table
    }

    pub fn lookup_user(&self, u: usize) -> Result<&[f64]> {
        if u >= self.n_users() {
            return Err(CkfError::Index {
                what: "user table",
                index: u,
                len: self.n_users(),
            });
        }
        Ok(self.user_table.row_slice(u))
    }

    /// The reserved row used for users unseen in training.
    pub fn cold_user(&self) -> &[f64] {
        self.user_table.row_slice(self.n_users())
    }

    pub fn lookup_item(&self, v: usize) -> Result<&[f64]> {
        if v >= self.n_items() {
            return Err(CkfError::Index {
                what: "item table",
                index: v,
                len: self.n_items(),
            });
        }
        Ok(self.item_table.row_slice(v))
    }

    /// The `k` items most cosine-similar to `v`, excluding `v`. Ties go to
    /// the smaller id; zero-norm items rank last.
    pub fn nearest_items(&self, v: usize, k: usize) -> Result<Vec<usize>> {
        let q = self.lookup_item(v)?;
        if k >= self.n_items() {
            return Err(CkfError::contract(format!("k={k} needs k < {} items", self.n_items())));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.n_items())
            .filter(|&j| j != v)
            .map(|j| (cosine(q, self.item_table.row_slice(j)), j))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(k).map(|(_, j)| j).collect())
    }

    pub fn to_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(USER_TABLE, self.user_table.clone()).expect("fresh store");
        p.insert(ITEM_TABLE, self.item_table.clone()).expect("fresh store");
        p
    }

    pub fn from_params(p: &ParamStore) -> Result<Self> {
        Self::new(p.get(USER_TABLE)?.clone(), p.get(ITEM_TABLE)?.clone())
    }
}

impl NeighborSource for CfEmbeddings {
    fn neighbors(&self, item: usize) -> Vec<usize> {
        self.nearest_items(item, self.n_items() - 1).unwrap_or_default()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// One scored pair: user, item, target, and the item history for SeqAttn.
struct Pair {
    user: usize,
    item: usize,
    target: f64,
    history: Vec<usize>,
}

/// Trains the tables on `train` (dense ids, sorted by user then time).
/// Returns the embeddings and the mean loss of every epoch.
pub fn train_cf(
    train: &[Interaction],
    n_users: usize,
    n_items: usize,
    cfg: &CfTrainConfig,
) -> Result<(CfEmbeddings, Vec<f64>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CkfError::contract("train_cf needs at least one interaction"));
    }
    if let Some(bad) = train
        .iter()
        .find(|i| i.user_id as usize >= n_users || i.item_id as usize >= n_items)
    {
        return Err(CkfError::contract(format!(
            "interaction ({}, {}) outside {n_users} users x {n_items} items",
            bad.user_id, bad.item_id
        )));
    }

    let mut rng = SplitMix64::derive(cfg.seed, "cf-init");
    let mut params = ParamStore::new();
    params.insert(USER_TABLE, Tensor::randn(&[n_users, cfg.d_cf], cfg.init_std, &mut rng))?;
    params.insert(ITEM_TABLE, Tensor::randn(&[n_items, cfg.d_cf], cfg.init_std, &mut rng))?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });

    let mut seen = vec![BTreeSet::new(); n_users];
    let mut positives = Vec::with_capacity(train.len());
    let mut last_user = usize::MAX;
    let mut hist: Vec<usize> = Vec::new();
    for it in train {
        let (u, v) = (it.user_id as usize, it.item_id as usize);
        if u != last_user {
            hist.clear();
            last_user = u;
        }
        seen[u].insert(v);
        let start = hist.len().saturating_sub(cfg.history_limit);
        positives.push((u, v, f64::from(it.rating), hist[start..].to_vec()));
        hist.push(v);
    }

    let mut sample_rng = SplitMix64::derive(cfg.seed, "cf-sample");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..positives.len()).collect();
        sample_rng.shuffle(&mut order);
        let mut pairs = Vec::new();
        for &i in &order {
            let (u, v, r, ref h) = positives[i];
            match cfg.objective {
                CfObjective::RatingMse => pairs.push(Pair {
                    user: u,
                    item: v,
                    target: r,
                    history: h.clone(),
                }),
                CfObjective::ImplicitBce => {
                    pairs.push(Pair {
                        user: u,
                        item: v,
                        target: 1.0,
                        history: h.clone(),
                    });
                    if seen[u].len() < n_items {
                        for _ in 0..cfg.negatives {
                            let neg = loop {
                                let c = sample_rng.below(n_items);
                                if !seen[u].contains(&c) {
                                    break c;
                                }
                            };
                            pairs.push(Pair {
                                user: u,
                                item: neg,
                                target: 0.0,
                                history: h.clone(),
                            });
                        }
                    }
                }
            }
        }

        let (mut total, mut count) = (0.0, 0usize);
        for (b, chunk) in pairs.chunks(cfg.batch).enumerate() {
            let mut tape = Tape::new();
            let ut = tape.leaf(params.get(USER_TABLE)?.clone(), true);
            let it = tape.leaf(params.get(ITEM_TABLE)?.clone(), true);
            let scores = score_batch(&mut tape, ut, it, chunk, cfg.backend)?;
            let targets: Vec<f64> = chunk.iter().map(|p| p.target).collect();
            let loss = match cfg.objective {
                CfObjective::ImplicitBce => tape.bce_with_logits(scores, &targets)?,
                CfObjective::RatingMse => tape.mse(scores, &targets)?,
            };
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(CkfError::Numeric(format!(
                    "cf loss {lv} at epoch {epoch}, batch {b} ({} pairs)",
                    chunk.len()
                )));
            }
            total += lv * chunk.len() as f64;
            count += chunk.len();
            let grads = tape.backward(loss)?;
            let gu = grads.get(ut).expect("user grad");
            let gi = grads.get(it).expect("item grad");
            opt.step(&mut params, [(USER_TABLE, gu), (ITEM_TABLE, gi)], |_| false)?;
        }
        let mean = total / count as f64;
        log::debug!("cf epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }

    let users = params.remove(USER_TABLE).expect("user table");
    let items = params.remove(ITEM_TABLE).expect("item table");
    let trained: Vec<bool> = (0..n_users).map(|u| !seen[u].is_empty()).collect();
    Ok((CfEmbeddings::new(with_mean_row(users, &trained), items)?, epoch_losses))
}

/// Appends the mean of the trained rows and copies it over untrained rows.
fn with_mean_row(table: Tensor, trained: &[bool]) -> Tensor {
    let (n, d) = (table.rows(), table.cols());
    let mut mean = vec![0.0; d];
    let k = trained.iter().filter(|&&t| t).count().max(1);
    for u in (0..n).filter(|&u| trained[u]) {
        for (m, x) in mean.iter_mut().zip(table.row_slice(u)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let mut data = table.into_data();
    for u in (0..n).filter(|&u| !trained[u]) {
        data[u * d..(u + 1) * d].copy_from_slice(&mean);
    }
    data.extend_from_slice(&mean);
    Tensor::new(vec![n + 1, d], data).expect("shape")
}

fn score_batch(tape: &mut Tape, ut: Var, it: Var, chunk: &[Pair], backend: CfBackend) -> Result<Var> {
    let users: Vec<usize> = chunk.iter().map(|p| p.user).collect();
    let items: Vec<usize> = chunk.iter().map(|p| p.item).collect();
    let eu = tape.gather(ut, &users)?;
    let ev = tape.gather(it, &items)?;
    let query = match backend {
        CfBackend::Mf => eu,
        CfBackend::SeqAttn => {
            // pooled history + e_u, each pooled with e_u as the query
            let mut rows = Vec::with_capacity(chunk.len());
            for (r, p) in chunk.iter().enumerate() {
                let q = tape.gather(ut, &[users[r]])?;
                let pooled = if p.history.is_empty() {
                    q
                } else {
                    let h = tape.gather(it, &p.history)?;
                    let s = tape.matmul_nt(q, h)?;
                    let a = tape.softmax(s, 1)?;
                    tape.matmul(a, h)?
                };
                rows.push(tape.add(pooled, q)?);
            }
            stack_rows(tape, &rows)?
        }
    };
    let prod = tape.mul(query, ev)?;
    Ok(tape.sum_rows(prod))
}

/// Stacks 1×d rows into an n×d matrix.
fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let d = tape.value(rows[0]).cols();
    let base = tape.constant(Tensor::zeros(&[rows.len(), d]));
    let placed: Vec<(usize, Var)> = rows.iter().copied().enumerate().collect();
    tape.replace_rows(base, &placed)
}
