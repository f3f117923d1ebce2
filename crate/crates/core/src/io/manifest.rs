//! Dataset manifest: CSV with header `subject_id,age,split,path`.
//!
//! Paths are relative to the manifest's directory and point at CTNS image
//! tensors of shape `[H, W, 3]`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const COLUMNS: [&str; 4] = ["subject_id", "age", "split", "path"];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Finetune,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Finetune => "finetune",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "finetune" => Ok(Split::Finetune),
            other => Err(format!("split must be train, test, or finetune, got {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: u64,
    pub age: u32,
    pub split: Split,
    pub path: String,
}

/// Parses manifest text. When `base` is given, every path must resolve to an
/// existing file under it.
pub fn parse_manifest(text: &str, base: Option<&Path>) -> Result<Vec<SubjectRecord>, ManifestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let mut pos = [0usize; 4];
    for (slot, name) in pos.iter_mut().zip(COLUMNS) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| ManifestError::Parse {
            line: 1,
            message: format!("missing column {name:?}"),
        })?;
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            ManifestError::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(pos[i]).unwrap_or("");
        let err = |message: String| ManifestError::Parse { line, message };

        let subject_id = field(0)
            .parse::<u64>()
            .map_err(|_| err(format!("subject_id {:?} is not a non-negative integer", field(0))))?;
        let age = field(1)
            .parse::<u32>()
            .map_err(|_| err(format!("age {:?} is not a non-negative integer", field(1))))?;
        let split = field(2).parse::<Split>().map_err(err)?;
        let path = field(3).to_string();
        if path.is_empty() {
            return Err(err("empty path".into()));
        }
        if let Some(base) = base {
            if !base.join(&path).is_file() {
                return Err(err(format!("path {path:?} does not resolve to a file")));
            }
        }
        out.push(SubjectRecord {
            subject_id,
            age,
            split,
            path,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SubjectRecord>, ManifestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, Some(base))
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SubjectRecord]) -> Result<(), ManifestError> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(COLUMNS)?;
    for r in records {
        w.write_record([
            r.subject_id.to_string(),
            r.age.to_string(),
            r.split.to_string(),
            r.path.clone(),
        ])?;
    }
    w.flush().map_err(|source| ManifestError::Io {
        path: path.as_ref().to_path_buf(),
        source,
    })?;
    Ok(())
}
