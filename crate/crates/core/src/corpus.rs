//! Fixed-length token corpora: one row per line, space-separated ids.
//! Paired corpora live in two aligned files `<stem>.src` and `<stem>.tgt`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::categorical::TokenId;
use crate::denoiser::DataModel;
use crate::error::{Error, Result};
use crate::files::{write_atomic, write_json};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub rows: Vec<Vec<TokenId>>,
    /// Aligned conditioning rows, one per entry of `rows`.
    pub sources: Option<Vec<Vec<TokenId>>>,
}

pub fn parse_rows(text: &str) -> Result<Vec<Vec<TokenId>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<TokenId>()
                    .map_err(|_| Error::Format(format!("line {}: bad token id {tok:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            let first: &Vec<TokenId> = first;
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "line {}: length {} differs from {}",
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_rows(rows: &[Vec<TokenId>]) -> String {
    let mut s = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_rows(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_rows(&text)
}

pub fn write_rows(path: &Path, rows: &[Vec<TokenId>]) -> Result<()> {
    write_atomic(path, format_rows(rows).as_bytes())
}

/// `<stem>.<ext>` without replacing an existing extension.
pub fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

impl Corpus {
    pub fn seq_len(&self) -> Option<usize> {
        self.rows.first().map(Vec::len)
    }

    /// Ids below `k`, no mask ids, aligned sources.
    pub fn validate(&self, k: usize, mask: Option<TokenId>) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Format("corpus has no rows".into()));
        }
        let check = |rows: &[Vec<TokenId>]| -> Result<()> {
            for row in rows {
                for &x in row {
                    if x >= k {
                        return Err(Error::TokenOutOfRange { id: x, k });
                    }
                    if Some(x) == mask {
                        return Err(Error::Format(format!("mask id {x} appears in data")));
                    }
                }
            }
            Ok(())
        };
        check(&self.rows)?;
        if let Some(src) = &self.sources {
            if src.len() != self.rows.len() {
                return Err(Error::Format(format!(
                    "{} source rows for {} target rows",
                    src.len(),
                    self.rows.len()
                )));
            }
            check(src)?;
        }
        Ok(())
    }

    /// Reads `path` directly, or `path.src` / `path.tgt` when `path` itself
    /// does not exist.
    pub fn load(path: &Path) -> Result<Self> {
        if path.exists() {
            return Ok(Self {
                rows: read_rows(path)?,
                sources: None,
            });
        }
        let (src, tgt) = (with_suffix(path, "src"), with_suffix(path, "tgt"));
        if src.exists() && tgt.exists() {
            return Ok(Self {
                rows: read_rows(&tgt)?,
                sources: Some(read_rows(&src)?),
            });
        }
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: no corpus file or .src/.tgt pair", path.display()),
        )))
    }

    /// Writes rows to `path`, or a `.src`/`.tgt` pair when sources are present.
    pub fn save(&self, path: &Path) -> Result<()> {
        match &self.sources {
            None => write_rows(path, &self.rows),
            Some(src) => {
                write_rows(&with_suffix(path, "src"), src)?;
                write_rows(&with_suffix(path, "tgt"), &self.rows)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    Factorized,
    Markov,
    ReversePairs,
}

/// A generated corpus and, for unconditional kinds, the model it came from.
#[derive(Debug, Clone)]
pub struct Generated {
    pub corpus: Corpus,
    pub model: Option<DataModel>,
}

/// Synthetic data; token `K - 1` is reserved for the mask and never emitted.
pub fn generate<R: Rng + ?Sized>(kind: CorpusKind, k: usize, n: usize, count: usize, rng: &mut R) -> Result<Generated> {
    if k < 2 || n == 0 {
        return Err(Error::InvalidArgument(format!("need K >= 2 and N >= 1, got K = {k}, N = {n}")));
    }
    match kind {
        CorpusKind::Factorized => {
            let model = DataModel::random_factorized(k, n, rng)?;
            let rows = (0..count).map(|_| model.sample(n, rng)).collect();
            Ok(Generated {
                corpus: Corpus { rows, sources: None },
                model: Some(model),
            })
        }
        CorpusKind::Markov => {
            let model = DataModel::random_markov(k, rng)?;
            let rows = (0..count).map(|_| model.sample(n, rng)).collect();
            Ok(Generated {
                corpus: Corpus { rows, sources: None },
                model: Some(model),
            })
        }
        CorpusKind::ReversePairs => {
            if k < 3 {
                return Err(Error::InvalidArgument("reverse-pairs needs K >= 3".into()));
            }
            let sources: Vec<Vec<TokenId>> =
                (0..count).map(|_| (0..n).map(|_| rng.gen_range(0..k - 1)).collect()).collect();
            let rows = sources.iter().map(|s| s.iter().rev().cloned().collect()).collect();
            Ok(Generated {
                corpus: Corpus {
                    rows,
                    sources: Some(sources),
                },
                model: None,
            })
        }
    }
}

/// Path of the data-model sidecar written next to a generated corpus.
pub fn sidecar_path(out: &Path) -> PathBuf {
    with_suffix(out, "model.json")
}

impl Generated {
    pub fn save(&self, out: &Path) -> Result<()> {
        self.corpus.save(out)?;
        if let Some(model) = &self.model {
            write_json(&sidecar_path(out), model)?;
        }
        Ok(())
    }
}
