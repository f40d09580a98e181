use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{CkfError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const USER_UNK: usize = 4;
pub const ITEM_UNK: usize = 5;
/// Out-of-vocabulary word.
pub const UNK: usize = 6;

pub const USER_MARKER: &str = "<user_unk>";
pub const ITEM_MARKER: &str = "<item_unk>";

const SPECIALS: [&str; 14] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<sep>",
    USER_MARKER,
    ITEM_MARKER,
    "<unk>",
    "1",
    "2",
    "3",
    "4",
    "5",
    "yes",
    "no",
];

/// Word-level vocabulary; a token's id is its line number in the saved file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercases and splits on whitespace; every punctuation character is its
/// own token and placeholder markers survive intact.
pub fn split_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = lower.as_str();
    while let Some(c) = rest.chars().next() {
        if c == '<' {
            if let Some(m) = [USER_MARKER, ITEM_MARKER].into_iter().find(|m| rest.starts_with(m)) {
                flush(&mut word, &mut out);
                out.push(m.to_string());
                rest = &rest[m.len()..];
                continue;
            }
        }
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

impl Vocab {
    /// Special tokens followed by every distinct word of `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(split_words(t));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn special_count() -> usize {
        SPECIALS.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Ids of the rating answers "1".."5", in order.
    pub fn rating_ids(&self) -> [usize; 5] {
        [7, 8, 9, 10, 11]
    }

    pub fn yes_id(&self) -> usize {
        12
    }

    pub fn no_id(&self) -> usize {
        13
    }

    /// Word ids without BOS; unknown words map to [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// `BOS` followed by [`Vocab::tokenize`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.tokenize(text));
        ids
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != BOS)
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| CkfError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CkfError::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(CkfError::contract(format!(
                "{}: special tokens missing or reordered",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Normalized form of `text`: what detokenize(tokenize(text)) returns for
/// in-vocabulary text.
pub fn normalize(text: &str) -> String {
    split_words(text).join(" ")
}
