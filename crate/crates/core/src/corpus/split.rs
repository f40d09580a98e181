use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::interaction::Interaction;
use crate::error::{CkfError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    LeaveOneOut,
    WarmCold,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub k_core: usize,
    pub k_core_iterative: bool,
    pub few_shot_n: Option<usize>,
    pub cold_user_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::LeaveOneOut,
            k_core: 20,
            k_core_iterative: false,
            few_shot_n: None,
            cold_user_fraction: None,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.few_shot_n) {
            (SplitMode::FewShot, None) => {
                return Err(CkfError::config("corpus.few_shot_n", "required in few-shot mode"))
            }
            (SplitMode::FewShot, Some(0)) => return Err(CkfError::config("corpus.few_shot_n", "must be positive")),
            (SplitMode::LeaveOneOut | SplitMode::WarmCold, Some(_)) => {
                return Err(CkfError::config("corpus.few_shot_n", "only valid in few-shot mode"))
            }
            _ => {}
        }
        match (self.mode, self.cold_user_fraction) {
            (SplitMode::WarmCold, Some(f)) if f > 0.0 && f < 1.0 => Ok(()),
            (SplitMode::WarmCold, _) => Err(CkfError::config(
                "corpus.cold_user_fraction",
                "warm-cold mode needs a fraction in (0,1)",
            )),
            (_, Some(_)) => Err(CkfError::config(
                "corpus.cold_user_fraction",
                "only valid in warm-cold mode",
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Valid,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Valid => "valid",
            Partition::Test => "test",
        }
    }
}

/// Interaction indices per partition (indices into the split input).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// Users held out entirely (warm-cold mode).
    pub cold_users: BTreeSet<u64>,
    pub few_shot_n: Option<usize>,
    pub dropped_users: usize,
}

impl Split {
    pub fn partition_of(&self, len: usize) -> Vec<Option<Partition>> {
        let mut out = vec![None; len];
        for &i in &self.train {
            out[i] = Some(Partition::Train);
        }
        for &i in &self.valid {
            out[i] = Some(Partition::Valid);
        }
        for &i in &self.test {
            out[i] = Some(Partition::Test);
        }
        out
    }

    pub fn indices(&self, p: Partition) -> &[usize] {
        match p {
            Partition::Train => &self.train,
            Partition::Valid => &self.valid,
            Partition::Test => &self.test,
        }
    }
}

/// Per user in timestamp order: last interaction to test, second-to-last to
/// valid, the rest to train. Warm-cold mode first moves a seeded fraction of
/// users wholesale into test. `data` must be sorted by `(user, timestamp)`.
pub fn leave_one_out_split(data: &[Interaction], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut by_user: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, it) in data.iter().enumerate() {
        by_user.entry(it.user_id).or_default().push(i);
    }
    let mut split = Split {
        few_shot_n: spec.few_shot_n,
        ..Split::default()
    };
    by_user.retain(|_, idx| {
        let keep = idx.len() >= 3;
        if !keep {
            split.dropped_users += 1;
        }
        keep
    });
    if split.dropped_users > 0 {
        log::warn!("dropped {} users with fewer than 3 interactions", split.dropped_users);
    }

    if spec.mode == SplitMode::WarmCold {
        let users: Vec<u64> = by_user.keys().copied().collect();
        let frac = spec.cold_user_fraction.unwrap_or(0.0);
        let n_cold = ((users.len() as f64) * frac).round() as usize;
        let mut rng = SplitMix64::derive(spec.seed, "cold-users");
        for j in rng.sample_indices(users.len(), n_cold) {
            split.cold_users.insert(users[j]);
        }
    }

    for (user, mut idx) in by_user {
        idx.sort_by_key(|&i| (data[i].timestamp, i));
        if split.cold_users.contains(&user) {
            split.test.extend(idx);
            continue;
        }
        let n = idx.len();
        split.test.push(idx[n - 1]);
        split.valid.push(idx[n - 2]);
        split.train.extend_from_slice(&idx[..n - 2]);
    }
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn it(u: u64, v: u64, t: i64) -> Interaction {
        Interaction {
            user_id: u,
            item_id: v,
            rating: 4,
            timestamp: t,
            comment: None,
        }
    }

    #[test]
    fn five_items_split_three_one_one() {
        let d: Vec<_> = (0..5).map(|k| it(1, 10 + k, k as i64)).collect();
        let s = leave_one_out_split(&d, &SplitSpec::default()).unwrap();
        assert_eq!(s.train, vec![0, 1, 2]);
        assert_eq!(s.valid, vec![3]);
        assert_eq!(s.test, vec![4]);
    }

    #[test]
    fn short_users_dropped_and_counted() {
        let d = vec![it(1, 1, 0), it(1, 2, 1), it(2, 1, 0), it(2, 2, 1), it(2, 3, 2)];
        let s = leave_one_out_split(&d, &SplitSpec::default()).unwrap();
        assert_eq!(s.dropped_users, 1);
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), 3);
    }

    #[test]
    fn warm_cold_half_of_four_users() {
        let d: Vec<_> = (0..4u64)
            .flat_map(|u| (0..4).map(move |k| it(u, k, k as i64)))
            .collect();
        let spec = SplitSpec {
            mode: SplitMode::WarmCold,
            cold_user_fraction: Some(0.5),
            seed: 7,
            ..SplitSpec::default()
        };
        let s = leave_one_out_split(&d, &spec).unwrap();
        assert_eq!(s.cold_users.len(), 2);
        for &u in &s.cold_users {
            let in_train = s.train.iter().chain(&s.valid).any(|&i| d[i].user_id == u);
            assert!(!in_train);
            assert_eq!(s.test.iter().filter(|&&i| d[i].user_id == u).count(), 4);
        }
    }

    #[test]
    fn spec_validation() {
        let bad = SplitSpec {
            mode: SplitMode::FewShot,
            ..SplitSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SplitSpec {
            mode: SplitMode::WarmCold,
            cold_user_fraction: Some(1.0),
            ..SplitSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SplitSpec {
            cold_user_fraction: Some(0.3),
            ..SplitSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn test_item_is_timestamp_max() {
        let d = vec![it(1, 1, 5), it(1, 2, 9), it(1, 3, 1), it(1, 4, 7)];
        let mut sorted = d.clone();
        sorted.sort_by_key(|i| (i.user_id, i.timestamp));
        let s = leave_one_out_split(&sorted, &SplitSpec::default()).unwrap();
        assert_eq!(sorted[s.test[0]].timestamp, 9);
        assert_eq!(sorted[s.valid[0]].timestamp, 7);
    }
}
