use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CkfError, Result};

/// One user-item event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub rating: u8,
    pub timestamp: i64,
    pub comment: Option<String>,
}

/// Item titles keyed by item id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    titles: BTreeMap<u64, String>,
}

impl Catalog {
    pub fn insert(&mut self, item: u64, title: impl Into<String>) {
        self.titles.entry(item).or_insert_with(|| title.into());
    }

    pub fn title(&self, item: u64) -> Option<&str> {
        self.titles.get(&item).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.titles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &str)> {
        self.titles.iter().map(|(k, v)| (*k, v.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// `u::v::r::t`, titles from a `id::title[::genres]` items file.
    MlDat,
    /// `u<TAB>v<TAB>r<TAB>t`, titles from an `id<TAB>title` items file.
    Tsv,
    /// JSON objects with `user`, `item`, `rating`, `timestamp`, `title`,
    /// optional `review_text`.
    ReviewJsonl,
}

impl FromStr for InputFormat {
    type Err = CkfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml-dat" => Ok(Self::MlDat),
            "tsv" => Ok(Self::Tsv),
            "review-jsonl" => Ok(Self::ReviewJsonl),
            other => Err(CkfError::config("corpus.format", format!("unknown format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParsedData {
    /// Sorted by `(user_id, timestamp)`; ties keep file order.
    pub interactions: Vec<Interaction>,
    pub catalog: Catalog,
    pub duplicates_dropped: usize,
}

#[derive(Deserialize)]
struct ReviewRecord {
    user: u64,
    item: u64,
    rating: f64,
    timestamp: i64,
    title: String,
    #[serde(default)]
    review_text: Option<String>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CkfError::io(path, e))
}

/// Reads an interaction file (and, for `ml-dat`/`tsv`, its items file).
pub fn parse_interactions(path: &Path, format: InputFormat, items: Option<&Path>) -> Result<ParsedData> {
    let text = read(path)?;
    let catalog_text = match (format, items) {
        (InputFormat::ReviewJsonl, _) => None,
        (_, Some(p)) => Some((p.display().to_string(), read(p)?)),
        (_, None) => {
            return Err(CkfError::config(
                "items",
                "ml-dat and tsv inputs need an items file with titles",
            ))
        }
    };
    parse_interactions_str(
        &text,
        &path.display().to_string(),
        format,
        catalog_text.as_ref().map(|(p, t)| (p.as_str(), t.as_str())),
    )
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> CkfError {
    CkfError::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn field<T: FromStr>(raw: &str, name: &str, path: &str, line: usize) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {name} {raw:?}")))
}

fn check_rating(r: i64, path: &str, line: usize) -> Result<u8> {
    if (1..=5).contains(&r) {
        Ok(r as u8)
    } else {
        Err(CkfError::RatingRange {
            path: path.to_string(),
            line,
            rating: r,
        })
    }
}

/// In-memory variant of [`parse_interactions`]; `catalog` is `(name, text)`.
pub fn parse_interactions_str(
    text: &str,
    source: &str,
    format: InputFormat,
    catalog: Option<(&str, &str)>,
) -> Result<ParsedData> {
    let mut raw = Vec::new();
    let mut cat = Catalog::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let it = match format {
            InputFormat::MlDat | InputFormat::Tsv => {
                let sep = if format == InputFormat::MlDat { "::" } else { "\t" };
                let parts: Vec<&str> = line.split(sep).collect();
                if parts.len() != 4 {
                    return Err(parse_err(
                        source,
                        lineno,
                        format!("expected 4 fields, got {}", parts.len()),
                    ));
                }
                let rating: i64 = field(parts[2], "rating", source, lineno)?;
                Interaction {
                    user_id: field(parts[0], "user", source, lineno)?,
                    item_id: field(parts[1], "item", source, lineno)?,
                    rating: check_rating(rating, source, lineno)?,
                    timestamp: field(parts[3], "timestamp", source, lineno)?,
                    comment: None,
                }
            }
            InputFormat::ReviewJsonl => {
                let rec: ReviewRecord =
                    serde_json::from_str(line).map_err(|e| parse_err(source, lineno, e.to_string()))?;
                if rec.rating.fract() != 0.0 {
                    return Err(parse_err(source, lineno, format!("non-integer rating {}", rec.rating)));
                }
                cat.insert(rec.item, rec.title);
                Interaction {
                    user_id: rec.user,
                    item_id: rec.item,
                    rating: check_rating(rec.rating as i64, source, lineno)?,
                    timestamp: rec.timestamp,
                    comment: rec.review_text.filter(|c| !c.trim().is_empty()),
                }
            }
        };
        raw.push(it);
    }

    if let Some((name, ctext)) = catalog {
        let sep = if format == InputFormat::MlDat { "::" } else { "\t" };
        for (i, line) in ctext.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(sep);
            let id: u64 = field(parts.next().unwrap_or(""), "item", name, i + 1)?;
            let title = parts
                .next()
                .filter(|t| !t.trim().is_empty())
                .ok_or_else(|| parse_err(name, i + 1, "missing title"))?;
            cat.insert(id, title.trim());
        }
    }

    let mut seen = HashSet::new();
    let before = raw.len();
    raw.retain(|it| seen.insert((it.user_id, it.item_id, it.timestamp)));
    let duplicates_dropped = before - raw.len();

    if let Some(missing) = raw.iter().find(|it| cat.title(it.item_id).is_none()) {
        return Err(CkfError::contract(format!("item {} has no title", missing.item_id)));
    }

    raw.sort_by_key(|it| (it.user_id, it.timestamp));
    Ok(ParsedData {
        interactions: raw,
        catalog: cat,
        duplicates_dropped,
    })
}
