use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::Corpus;
use super::split::Partition;
use crate::error::{CkfError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "RP")]
    Rp,
    #[serde(rename = "CTR")]
    Ctr,
    #[serde(rename = "TopK")]
    TopK,
    #[serde(rename = "Explain")]
    Explain,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Rp, Task::Ctr, Task::TopK, Task::Explain];

    /// Stable index used in parameter names (`lora.task{t}`).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Rp => "RP",
            Task::Ctr => "CTR",
            Task::TopK => "TopK",
            Task::Explain => "Explain",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = CkfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "RP" => Ok(Task::Rp),
            "CTR" => Ok(Task::Ctr),
            "TopK" => Ok(Task::TopK),
            "Explain" => Ok(Task::Explain),
            other => Err(CkfError::Dispatch(format!("{other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Candidate {
    Item(usize),
    /// Ground truth plus negatives, in prompt order.
    Set(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Label {
    Rating(u8),
    Click(bool),
    Item(usize),
}

/// One supervised instance. Ids are the corpus' dense ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskExample {
    pub task: Task,
    pub user: usize,
    /// Most recent last.
    pub history: Vec<usize>,
    pub history_ratings: Vec<u8>,
    /// Present for Explain only.
    pub history_comments: Option<Vec<String>>,
    pub candidate: Candidate,
    pub label: Label,
}

impl TaskExample {
    /// The item the item-side placeholder stands for. TopK has no single
    /// candidate, so it uses the most recent history item.
    pub fn focus_item(&self) -> usize {
        match &self.candidate {
            Candidate::Item(v) => *v,
            Candidate::Set(s) => self.history.last().copied().unwrap_or(s[0]),
        }
    }

    pub fn candidates(&self) -> &[usize] {
        match &self.candidate {
            Candidate::Item(v) => std::slice::from_ref(v),
            Candidate::Set(s) => s,
        }
    }
}

/// Item neighbours for hard negative sampling, most similar first.
pub trait NeighborSource {
    fn neighbors(&self, item: usize) -> Vec<usize>;
}

#[derive(Clone, Copy)]
pub enum Sampler<'a> {
    Uniform,
    Hard(&'a dyn NeighborSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOptions {
    pub n_neg: usize,
    pub history_limit: usize,
    /// Cap on train candidates drawn per user; `None` keeps all.
    pub max_per_user: Option<usize>,
    pub seed: u64,
}

impl Default for ExampleOptions {
    fn default() -> Self {
        Self {
            n_neg: 10,
            history_limit: 10,
            max_per_user: None,
            seed: 0,
        }
    }
}

/// Builds `task` examples for one partition.
///
/// Candidates are the partition's interactions (for test, each user's last
/// test interaction); history is everything the user did before the
/// candidate, truncated to `history_limit`. Train candidates need at least
/// one history item. Few-shot corpora subsample the train list.
pub fn build_examples(
    corpus: &Corpus,
    part: Partition,
    task: Task,
    opts: &ExampleOptions,
    sampler: Sampler<'_>,
) -> Result<Vec<TaskExample>> {
    if task == Task::Explain && !corpus.has_comments() {
        return Ok(Vec::new());
    }
    let parts = corpus.split.partition_of(corpus.interactions.len());
    let seqs = corpus.user_sequences();
    let seen = corpus.user_item_sets();
    let mut rng = SplitMix64::derive(opts.seed, &format!("examples-{}-{}", task.name(), part.name()));
    let mut out = Vec::new();

    for (user, seq) in seqs.iter().enumerate() {
        let mut positions: Vec<usize> = (0..seq.len()).filter(|&p| parts[seq[p]] == Some(part)).collect();
        match part {
            Partition::Test => positions = positions.last().copied().into_iter().collect(),
            Partition::Train => positions.retain(|&p| p > 0),
            Partition::Valid => {}
        }
        if task == Task::Explain {
            positions.retain(|&p| corpus.interactions[seq[p]].comment.is_some());
        }
        if let (Partition::Train, Some(cap)) = (part, opts.max_per_user) {
            if positions.len() > cap {
                let mut keep = rng.sample_indices(positions.len(), cap);
                keep.sort_unstable();
                positions = keep.into_iter().map(|k| positions[k]).collect();
            }
        }
        for p in positions {
            let target = &corpus.interactions[seq[p]];
            let start = p.saturating_sub(opts.history_limit);
            let hist = &seq[start..p];
            let history: Vec<usize> = hist.iter().map(|&i| corpus.interactions[i].item_id as usize).collect();
            let history_ratings = hist.iter().map(|&i| corpus.interactions[i].rating).collect();
            let truth = target.item_id as usize;
            let base = TaskExample {
                task,
                user,
                history,
                history_ratings,
                history_comments: None,
                candidate: Candidate::Item(truth),
                label: Label::Rating(target.rating),
            };
            match task {
                Task::Rp => out.push(base),
                Task::Explain => out.push(TaskExample {
                    history_comments: Some(
                        hist.iter()
                            .filter_map(|&i| corpus.interactions[i].comment.clone())
                            .collect(),
                    ),
                    ..base
                }),
                Task::Ctr => {
                    let neg = sample_negatives(&mut rng, corpus, user, truth, &seen[user], 1, Sampler::Uniform)?[0];
                    out.push(TaskExample {
                        label: Label::Click(true),
                        ..base.clone()
                    });
                    out.push(TaskExample {
                        candidate: Candidate::Item(neg),
                        label: Label::Click(false),
                        ..base
                    });
                }
                Task::TopK => {
                    let mut set = sample_negatives(&mut rng, corpus, user, truth, &seen[user], opts.n_neg, sampler)?;
                    set.push(truth);
                    rng.shuffle(&mut set);
                    out.push(TaskExample {
                        candidate: Candidate::Set(set),
                        label: Label::Item(truth),
                        ..base
                    });
                }
            }
        }
    }

    if let (Partition::Train, Some(n)) = (part, corpus.split.few_shot_n) {
        if out.len() > n {
            let mut frng = SplitMix64::derive(opts.seed, &format!("few-shot-{}", task.name()));
            let mut keep = frng.sample_indices(out.len(), n);
            keep.sort_unstable();
            out = keep.into_iter().map(|k| out[k].clone()).collect();
        }
    }
    Ok(out)
}

fn sample_negatives(
    rng: &mut SplitMix64,
    corpus: &Corpus,
    user: usize,
    truth: usize,
    seen: &BTreeSet<usize>,
    n: usize,
    sampler: Sampler<'_>,
) -> Result<Vec<usize>> {
    let short = |have: usize| {
        CkfError::contract(format!(
            "user {} has {have} eligible negatives, {n} required",
            corpus.user_raw[user]
        ))
    };
    match sampler {
        Sampler::Uniform => {
            let eligible: Vec<usize> = (0..corpus.n_items()).filter(|v| !seen.contains(v)).collect();
            if eligible.len() < n {
                return Err(short(eligible.len()));
            }
            Ok(rng
                .sample_indices(eligible.len(), n)
                .into_iter()
                .map(|k| eligible[k])
                .collect())
        }
        Sampler::Hard(src) => {
            let picked: Vec<usize> = src
                .neighbors(truth)
                .into_iter()
                .filter(|v| !seen.contains(v))
                .take(n)
                .collect();
            if picked.len() < n {
                return Err(short(picked.len()));
            }
            Ok(picked)
        }
    }
}
