use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::filter::k_core_filter;
use super::interaction::{Interaction, ParsedData};
use super::prompt::template_vocabulary;
use super::split::{leave_one_out_split, Partition, Split, SplitSpec};
use super::vocab::Vocab;
use crate::error::{CkfError, Result};

/// Filtered, split and dense-indexed interaction data.
///
/// `interactions` carry dense ids (`0..n_users`, `0..n_items`, assigned in
/// ascending raw-id order) and are sorted by `(user, timestamp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub interactions: Vec<Interaction>,
    pub titles: Vec<String>,
    pub user_raw: Vec<u64>,
    pub item_raw: Vec<u64>,
    pub split: Split,
    pub vocab: Vocab,
}

/// Dataset statistics in the usual paper-table layout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub interactions: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub users: usize,
    pub items: usize,
    pub avg_u: f64,
    pub avg_i: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>14} {:>8} {:>8} {:>8} {:>7} {:>7} {:>8} {:>8}",
            "#Interactions", "#Train", "#Valid", "#Test", "#User", "#Item", "Avg-U", "Avg-I"
        )?;
        write!(
            f,
            "{:>14} {:>8} {:>8} {:>8} {:>7} {:>7} {:>8.2} {:>8.2}",
            self.interactions, self.train, self.valid, self.test, self.users, self.items, self.avg_u, self.avg_i
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    few_shot_n: Option<usize>,
    dropped_users: usize,
    cold_users: Vec<u64>,
}

impl Corpus {
    /// k-core filter, split, then re-index the surviving users and items.
    pub fn build(parsed: &ParsedData, spec: &SplitSpec) -> Result<Corpus> {
        spec.validate()?;
        let filtered = k_core_filter(&parsed.interactions, spec.k_core, spec.k_core_iterative);
        if filtered.is_empty() {
            return Err(CkfError::contract(format!(
                "no interactions survive the {}-core filter",
                spec.k_core
            )));
        }
        let split = leave_one_out_split(&filtered, spec)?;
        let parts = split.partition_of(filtered.len());

        let kept: Vec<(Interaction, Partition)> = filtered
            .into_iter()
            .zip(parts)
            .filter_map(|(it, p)| p.map(|p| (it, p)))
            .collect();

        let titles: BTreeMap<u64, String> = kept
            .iter()
            .map(|(it, _)| {
                let t = parsed
                    .catalog
                    .title(it.item_id)
                    .ok_or_else(|| CkfError::contract(format!("item {} has no title", it.item_id)))?;
                Ok((it.item_id, t.to_string()))
            })
            .collect::<Result<_>>()?;
        let raw_rows: Vec<(Interaction, Partition)> = kept;
        let cold: BTreeSet<u64> = split.cold_users.clone();
        Self::from_raw(raw_rows, titles, cold, split.few_shot_n, split.dropped_users)
    }

    fn from_raw(
        rows: Vec<(Interaction, Partition)>,
        titles: BTreeMap<u64, String>,
        cold_raw: BTreeSet<u64>,
        few_shot_n: Option<usize>,
        dropped_users: usize,
    ) -> Result<Corpus> {
        let user_raw: Vec<u64> = rows
            .iter()
            .map(|(i, _)| i.user_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let item_raw: Vec<u64> = titles.keys().copied().collect();
        let uidx: BTreeMap<u64, usize> = user_raw.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let vidx: BTreeMap<u64, usize> = item_raw.iter().enumerate().map(|(i, &v)| (v, i)).collect();

        let mut dense: Vec<(Interaction, Partition)> = rows
            .into_iter()
            .map(|(mut it, p)| {
                it.user_id = uidx[&it.user_id] as u64;
                it.item_id = *vidx
                    .get(&it.item_id)
                    .ok_or_else(|| CkfError::contract(format!("item {} has no title", it.item_id)))?
                    as u64;
                Ok((it, p))
            })
            .collect::<Result<_>>()?;
        dense.sort_by_key(|(it, _)| (it.user_id, it.timestamp));

        let mut split = Split {
            few_shot_n,
            dropped_users,
            cold_users: cold_raw.iter().filter_map(|u| uidx.get(u).map(|&d| d as u64)).collect(),
            ..Split::default()
        };
        for (i, (_, p)) in dense.iter().enumerate() {
            match p {
                Partition::Train => split.train.push(i),
                Partition::Valid => split.valid.push(i),
                Partition::Test => split.test.push(i),
            }
        }
        let interactions: Vec<Interaction> = dense.into_iter().map(|(it, _)| it).collect();
        let titles: Vec<String> = titles.into_values().collect();
        let vocab = Vocab::build(
            titles
                .iter()
                .map(String::as_str)
                .chain(std::iter::once(template_vocabulary().as_str()))
                .chain(interactions.iter().filter_map(|i| i.comment.as_deref())),
        );
        Ok(Corpus {
            interactions,
            titles,
            user_raw,
            item_raw,
            split,
            vocab,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_raw.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_raw.len()
    }

    pub fn has_comments(&self) -> bool {
        self.interactions.iter().any(|i| i.comment.is_some())
    }

    pub fn is_cold(&self, user: usize) -> bool {
        self.split.cold_users.contains(&(user as u64))
    }

    /// Interaction indices of each user, in time order.
    pub fn user_sequences(&self) -> Vec<Vec<usize>> {
        let mut seqs = vec![Vec::new(); self.n_users()];
        for (i, it) in self.interactions.iter().enumerate() {
            seqs[it.user_id as usize].push(i);
        }
        seqs
    }

    /// Every item each user interacted with, in any partition.
    pub fn user_item_sets(&self) -> Vec<BTreeSet<usize>> {
        let mut sets = vec![BTreeSet::new(); self.n_users()];
        for it in &self.interactions {
            sets[it.user_id as usize].insert(it.item_id as usize);
        }
        sets
    }

    pub fn partition_interactions(&self, p: Partition) -> impl Iterator<Item = &Interaction> {
        self.split.indices(p).iter().map(move |&i| &self.interactions[i])
    }

    pub fn stats(&self) -> DatasetStats {
        let n = self.interactions.len();
        DatasetStats {
            interactions: n,
            train: self.split.train.len(),
            valid: self.split.valid.len(),
            test: self.split.test.len(),
            users: self.n_users(),
            items: self.n_items(),
            avg_u: n as f64 / self.n_users().max(1) as f64,
            avg_i: n as f64 / self.n_items().max(1) as f64,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CkfError::io(dir, e))?;
        let mut rows = String::new();
        let mut splits = String::new();
        let parts = self.split.partition_of(self.interactions.len());
        for (i, it) in self.interactions.iter().enumerate() {
            rows.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                self.user_raw[it.user_id as usize],
                self.item_raw[it.item_id as usize],
                it.rating,
                it.timestamp,
                it.comment.as_deref().map(escape).unwrap_or_default()
            ));
            let p = parts[i].expect("every stored interaction is assigned");
            splits.push_str(&format!("{i}\t{}\n", p.name()));
        }
        let mut catalog = String::new();
        for (raw, t) in self.item_raw.iter().zip(&self.titles) {
            catalog.push_str(&format!("{raw}\t{}\n", escape(t)));
        }
        let meta = Meta {
            few_shot_n: self.split.few_shot_n,
            dropped_users: self.split.dropped_users,
            cold_users: self
                .split
                .cold_users
                .iter()
                .map(|&u| self.user_raw[u as usize])
                .collect(),
        };
        write(dir, "interactions.tsv", &rows)?;
        write(dir, "catalog.tsv", &catalog)?;
        write(dir, "splits.tsv", &splits)?;
        write(dir, "meta.json", &(serde_json::to_string_pretty(&meta)? + "\n"))?;
        self.vocab.save(&dir.join("vocab.txt"))
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let path = dir.join("interactions.tsv");
        if !path.exists() {
            return Err(CkfError::MissingArtifact {
                path,
                command: "build-corpus",
            });
        }
        let rows_text = read(dir, "interactions.tsv")?;
        let splits_text = read(dir, "splits.tsv")?;
        let catalog_text = read(dir, "catalog.tsv")?;
        let meta: Meta = serde_json::from_str(&read(dir, "meta.json")?)?;

        let bad = |f: &str, line: usize| CkfError::Parse {
            path: dir.join(f).display().to_string(),
            line: line + 1,
            msg: "malformed row".into(),
        };
        let mut titles = BTreeMap::new();
        for (n, line) in catalog_text.lines().enumerate() {
            let (id, t) = line.split_once('\t').ok_or_else(|| bad("catalog.tsv", n))?;
            titles.insert(id.parse::<u64>().map_err(|_| bad("catalog.tsv", n))?, unescape(t));
        }
        let parts: Vec<Partition> = splits_text
            .lines()
            .enumerate()
            .map(|(n, l)| match l.split_once('\t').map(|(_, p)| p) {
                Some("train") => Ok(Partition::Train),
                Some("valid") => Ok(Partition::Valid),
                Some("test") => Ok(Partition::Test),
                _ => Err(bad("splits.tsv", n)),
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (n, line) in rows_text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad("interactions.tsv", n));
            }
            let num = |s: &str| s.parse::<i64>().map_err(|_| bad("interactions.tsv", n));
            let it = Interaction {
                user_id: num(f[0])? as u64,
                item_id: num(f[1])? as u64,
                rating: num(f[2])? as u8,
                timestamp: num(f[3])?,
                comment: (!f[4].is_empty()).then(|| unescape(f[4])),
            };
            let p = *parts.get(n).ok_or_else(|| bad("splits.tsv", n))?;
            rows.push((it, p));
        }
        let corpus = Self::from_raw(
            rows,
            titles,
            meta.cold_users.into_iter().collect(),
            meta.few_shot_n,
            meta.dropped_users,
        )?;
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        Ok(Corpus { vocab, ..corpus })
    }
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| CkfError::io(p, e))
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    std::fs::read_to_string(&p).map_err(|e| CkfError::io(p, e))
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}
