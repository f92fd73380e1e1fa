//! Token vocabularies and their sidecar files.
//!
//! A sidecar is UTF-8 text with one token per line, LF-terminated; the line
//! number is the embedding row index.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum VocabError {
    #[error("I/O error on vocab {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocab is not valid UTF-8: {0}")]
    Utf8(String),
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("row {row} assigned to both {first:?} and {second:?}")]
    DuplicateRow { row: usize, first: String, second: String },
}

/// Token string to embedding row index, iterated in row order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    rows: IndexMap<String, usize>,
}

impl Vocab {
    /// Build from tokens listed in row order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut rows = IndexMap::new();
        for (i, tok) in tokens.into_iter().enumerate() {
            let tok = tok.into();
            if rows.contains_key(&tok) {
                return Err(VocabError::DuplicateToken(tok));
            }
            rows.insert(tok, i);
        }
        Ok(Vocab { rows })
    }

    /// Build from explicit `(token, row)` pairs. Rows need not be contiguous.
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        let mut by_row: Vec<(usize, String)> = Vec::new();
        let mut rows = IndexMap::new();
        for (tok, row) in pairs {
            let tok = tok.into();
            if rows.insert(tok.clone(), row).is_some() {
                return Err(VocabError::DuplicateToken(tok));
            }
            by_row.push((row, tok));
        }
        by_row.sort();
        for w in by_row.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(VocabError::DuplicateRow {
                    row: w[0].0,
                    first: w[0].1.clone(),
                    second: w[1].1.clone(),
                });
            }
        }
        rows.sort_by(|_, a, _, b| a.cmp(b));
        Ok(Vocab { rows })
    }

    /// Placeholder vocabulary naming each row by its index, used when a
    /// checkpoint ships without a sidecar.
    pub fn positional(rows: usize) -> Self {
        Vocab {
            rows: (0..rows).map(|i| (format!("<row {i}>"), i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, token: &str) -> Option<usize> {
        self.rows.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.rows.contains_key(token)
    }

    /// Largest row index, if any.
    pub fn max_row(&self) -> Option<usize> {
        self.rows.values().copied().max()
    }

    /// `(token, row)` in row order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.rows.iter().map(|(t, r)| (t.as_str(), *r))
    }

    /// True when rows are exactly `0..len` so the vocab can be written as a sidecar.
    pub fn is_dense(&self) -> bool {
        self.rows.values().enumerate().all(|(i, r)| i == *r)
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        if text.is_empty() {
            return Ok(Vocab::default());
        }
        let body = text.strip_suffix('\n').unwrap_or(text);
        Vocab::from_tokens(body.split('\n'))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let text = String::from_utf8(bytes).map_err(|e| VocabError::Utf8(e.to_string()))?;
        Vocab::parse(&text)
    }

    /// Sidecar text. Sparse vocabularies are written with empty filler lines
    /// for unassigned rows.
    pub fn to_text(&self) -> String {
        let mut lines = vec![String::new(); self.max_row().map_or(0, |m| m + 1)];
        for (tok, row) in self.iter() {
            lines[row] = tok.to_string();
        }
        let mut out = String::new();
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_number_is_row() {
        let v = Vocab::parse("a\nb\nc\n").unwrap();
        assert_eq!(v.row("a"), Some(0));
        assert_eq!(v.row("c"), Some(2));
        assert_eq!(v.to_text(), "a\nb\nc\n");
    }

    #[test]
    fn empty_file_is_empty_vocab() {
        assert!(Vocab::parse("").unwrap().is_empty());
    }

    #[test]
    fn duplicate_token_rejected() {
        assert!(matches!(Vocab::parse("a\na\n"), Err(VocabError::DuplicateToken(t)) if t == "a"));
    }

    #[test]
    fn pairs_are_ordered_by_row() {
        let v = Vocab::from_pairs([("c", 2), ("a", 0)]).unwrap();
        let order: Vec<_> = v.iter().map(|(t, _)| t).collect();
        assert_eq!(order, ["a", "c"]);
        assert!(!v.is_dense());
        assert!(matches!(Vocab::from_pairs([("a", 1), ("b", 1)]), Err(VocabError::DuplicateRow { row: 1, .. })));
    }
}
