use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde_json::{Map, Value};

use super::{DatasetSplits, Fact, Split, Vocabulary};
use crate::error::{Error, Result};

/// A fact as `(role, value)` strings in file order.
pub type RawFact = Vec<(String, String)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    /// One JSON object per line mapping each role to a list of values.
    JsonlRv,
    /// Tab-separated alternating role/value tokens.
    TsvRv,
}

impl DatasetFormat {
    pub fn id(self) -> &'static str {
        match self {
            DatasetFormat::JsonlRv => "jsonl-rv",
            DatasetFormat::TsvRv => "tsv-rv",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            DatasetFormat::JsonlRv => "jsonl",
            DatasetFormat::TsvRv => "tsv",
        }
    }

    pub fn split_file(self, split: Split) -> String {
        format!("{}.{}", split.name(), self.extension())
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl-rv" => Ok(DatasetFormat::JsonlRv),
            "tsv-rv" => Ok(DatasetFormat::TsvRv),
            other => Err(Error::Config(format!(
                "unknown dataset format {other:?} (expected jsonl-rv or tsv-rv)"
            ))),
        }
    }
}

fn parse_jsonl_line(line: &str) -> std::result::Result<RawFact, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let Value::Object(map) = value else {
        return Err("expected a JSON object of role -> values".into());
    };
    let mut raw = Vec::new();
    for (role, values) in map {
        match values {
            Value::String(v) => raw.push((role, v)),
            Value::Array(vs) => {
                if vs.is_empty() {
                    return Err(format!("role {role:?} has an empty value list"));
                }
                for v in vs {
                    match v {
                        Value::String(v) => raw.push((role.clone(), v)),
                        other => return Err(format!("role {role:?} has non-string value {other}")),
                    }
                }
            }
            other => return Err(format!("role {role:?} has non-string value {other}")),
        }
    }
    Ok(raw)
}

fn parse_tsv_line(line: &str) -> std::result::Result<RawFact, String> {
    let tokens: Vec<&str> = line.split('\t').collect();
    if !tokens.len().is_multiple_of(2) {
        return Err(format!(
            "expected alternating role/value tokens, found {} tokens",
            tokens.len()
        ));
    }
    Ok(tokens
        .chunks(2)
        .map(|c| (c[0].to_string(), c[1].to_string()))
        .collect())
}

/// Reads one split file. Blank lines are skipped.
pub fn read_split(path: &Path, format: DatasetFormat) -> Result<Vec<RawFact>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut facts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            DatasetFormat::JsonlRv => parse_jsonl_line(line),
            DatasetFormat::TsvRv => parse_tsv_line(line),
        };
        let raw = parsed.map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        if raw.len() < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("fact has arity {} (< 2)", raw.len()),
            });
        }
        facts.push(raw);
    }
    Ok(facts)
}

/// Loads `train`/`valid`/`test` from `dir`.
///
/// The vocabulary covers the union of the splits in first-seen order; role
/// domains come from the training split only. Duplicate facts inside a split
/// are dropped with a warning.
pub fn load_dataset(dir: &Path, format: DatasetFormat) -> Result<(Vocabulary, DatasetSplits)> {
    let mut vocab = Vocabulary::default();
    let mut encoded: Vec<Vec<Fact>> = Vec::with_capacity(3);
    for split in Split::ALL {
        let path = dir.join(format.split_file(split));
        let raw = read_split(&path, format)?;
        if split == Split::Train && raw.is_empty() {
            return Err(Error::Data(format!("empty split: {}", path.display())));
        }
        let mut seen = HashSet::new();
        let mut facts = Vec::with_capacity(raw.len());
        let mut duplicates = 0usize;
        for r in &raw {
            let pairs = r.iter().map(|(role, value)| vocab.intern(role, value)).collect();
            let fact = Fact::new(pairs)?;
            if seen.insert(fact.canonical()) {
                facts.push(fact);
            } else {
                duplicates += 1;
            }
        }
        if duplicates > 0 {
            log::warn!(
                "{}: dropped {duplicates} duplicate fact(s)",
                path.display()
            );
        }
        encoded.push(facts);
    }
    let test = encoded.pop().unwrap_or_default();
    let valid = encoded.pop().unwrap_or_default();
    let train = encoded.pop().unwrap_or_default();
    vocab.role_domains = vec![Vec::new(); vocab.n_roles()];
    vocab.rebuild_domains(&train);
    Ok((vocab, DatasetSplits::new(train, valid, test)))
}

fn check_token(token: &str, format: DatasetFormat) -> Result<()> {
    if format == DatasetFormat::TsvRv && (token.contains('\t') || token.contains('\n')) {
        return Err(Error::Data(format!(
            "token {token:?} cannot be written as tsv-rv"
        )));
    }
    Ok(())
}

pub fn write_split(path: &Path, format: DatasetFormat, vocab: &Vocabulary, facts: &[Fact]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for fact in facts {
        let raw = vocab.decode(fact);
        let line = match format {
            DatasetFormat::JsonlRv => {
                let mut map: Map<String, Value> = Map::new();
                for (role, value) in raw {
                    match map.entry(role).or_insert_with(|| Value::Array(Vec::new())) {
                        Value::Array(vs) => vs.push(Value::String(value)),
                        _ => unreachable!(),
                    }
                }
                Value::Object(map).to_string()
            }
            DatasetFormat::TsvRv => {
                let mut tokens = Vec::with_capacity(raw.len() * 2);
                for (role, value) in &raw {
                    check_token(role, format)?;
                    check_token(value, format)?;
                    tokens.push(role.as_str());
                    tokens.push(value.as_str());
                }
                tokens.join("\t")
            }
        };
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dir: &Path, format: DatasetFormat, vocab: &Vocabulary, splits: &DatasetSplits) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        write_split(&dir.join(format.split_file(split)), format, vocab, splits.split(split))?;
    }
    Ok(())
}
