use serde::{Deserialize, Serialize};

use super::interaction::{Catalog, Interaction, ParsedData};
use crate::rng::SplitMix64;

const GENRE_WORDS: [[&str; 5]; 2] = [
    ["galactic", "cosmic", "robot", "alien", "stellar"],
    ["romantic", "sweet", "wedding", "tender", "love"],
];
const NOUNS: [&str; 10] = [
    "dawn", "empire", "voyage", "secret", "harbor", "winter", "garden", "mirror", "river", "crown",
];

/// Two-genre corpus: the first half of the items belong to genre 0, the
/// rest to genre 1; even users prefer genre 0, odd users genre 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    /// Inclusive range of own-genre interactions per user.
    pub per_user: (usize, usize),
    pub comments: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 100,
            per_user: (40, 46),
            comments: false,
            seed: 0,
        }
    }
}

pub fn genre_of(item: usize, items: usize) -> usize {
    usize::from(item >= items / 2)
}

pub fn title_of(item: usize, items: usize) -> String {
    let g = genre_of(item, items);
    let j = item - g * (items / 2);
    let mut t = format!("{} {}", GENRE_WORDS[g][j % 5], NOUNS[(j / 5) % 10]);
    if j >= 50 {
        t.push_str(&format!(" {}", j / 50 + 1));
    }
    t
}

/// Dense-id items are `0..items`; raw ids are offset by one.
pub fn generate(spec: &SyntheticSpec) -> ParsedData {
    let mut rng = SplitMix64::derive(spec.seed, "synthetic");
    let half = spec.items / 2;
    let mut catalog = Catalog::default();
    for v in 0..spec.items {
        catalog.insert(v as u64 + 1, title_of(v, spec.items));
    }
    let mut rows = Vec::new();
    for u in 0..spec.users {
        let g = u % 2;
        let base: u8 = if rng.next_f64() < 0.5 { 4 } else { 5 };
        let (lo, hi) = spec.per_user;
        let n_own = (lo + rng.below(hi - lo + 1)).min(half);
        let n_cross = rng.below(3);
        let own_start = g * half;
        let other_start = (1 - g) * half;
        let mut items: Vec<(usize, bool)> = rng
            .sample_indices(half, n_own)
            .into_iter()
            .map(|j| (own_start + j, true))
            .chain(
                rng.sample_indices(half, n_cross.min(half))
                    .into_iter()
                    .map(|j| (other_start + j, false)),
            )
            .collect();
        rng.shuffle(&mut items);
        for (k, (v, own)) in items.into_iter().enumerate() {
            let rating = if own {
                if rng.next_f64() < 0.85 {
                    base
                } else {
                    base - 1
                }
            } else {
                1 + rng.below(2) as u8
            };
            let comment = spec.comments.then(|| {
                let verdict = match rating {
                    5 => "loved",
                    4 => "enjoyed",
                    3 => "tolerated",
                    _ => "disliked",
                };
                format!("{verdict} this {} story", GENRE_WORDS[genre_of(v, spec.items)][k % 5])
            });
            rows.push(Interaction {
                user_id: u as u64 + 1,
                item_id: v as u64 + 1,
                rating,
                timestamp: 1_000_000 + (k as i64) * 60,
                comment,
            });
        }
    }
    ParsedData {
        interactions: rows,
        catalog,
        duplicates_dropped: 0,
    }
}

/// The generated corpus in ml-dat form: `(ratings, movies)` file bodies.
pub fn to_ml_dat(data: &ParsedData) -> (String, String) {
    let mut ratings = String::new();
    for it in &data.interactions {
        ratings.push_str(&format!(
            "{}::{}::{}::{}\n",
            it.user_id, it.item_id, it.rating, it.timestamp
        ));
    }
    let mut movies = String::new();
    for (id, t) in data.catalog.iter() {
        movies.push_str(&format!("{id}::{t}::Synthetic\n"));
    }
    (ratings, movies)
}
