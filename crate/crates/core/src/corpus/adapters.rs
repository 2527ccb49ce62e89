//! Converters from the widely shared JSON distribution of the WOS, NYT and
//! RCV1-V2 benchmarks into a dataset directory.
//!
//! Expected raw layout (one directory per corpus):
//!
//! * `<prefix>_train.json`, `<prefix>_val.json` (or `_dev.json`),
//!   `<prefix>_test.json`: one `{"token": text, "label": [names]}` object
//!   per line;
//! * `<prefix>.taxonomy` (WOS ships it as `wos.taxnomy`): tab-separated
//!   `parent child child ...` lines, with `Root` as the root.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use super::{CorpusError, Dataset, Sample};
use crate::taxonomy::{LabelHierarchy, LabelSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Wos,
    Nyt,
    Rcv1,
}

/// Published sizes used to sanity-check converted corpora.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferenceStats {
    pub labels: usize,
    pub depth: u32,
    pub sizes: [usize; 3],
}

impl DatasetFormat {
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Wos => "wos",
            Self::Nyt => "nyt",
            Self::Rcv1 => "rcv1",
        }
    }

    pub fn reference(self) -> ReferenceStats {
        match self {
            Self::Wos => ReferenceStats {
                labels: 141,
                depth: 2,
                sizes: [30_070, 7_518, 9_397],
            },
            Self::Nyt => ReferenceStats {
                labels: 166,
                depth: 8,
                sizes: [23_345, 5_834, 7_292],
            },
            Self::Rcv1 => ReferenceStats {
                labels: 103,
                depth: 4,
                sizes: [20_833, 2_316, 781_265],
            },
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wos" => Ok(Self::Wos),
            "nyt" => Ok(Self::Nyt),
            "rcv1" | "rcv1-v2" | "rcv1v2" => Ok(Self::Rcv1),
            other => Err(CorpusError::MissingRawData(format!(
                "unknown dataset format {other:?}; expected wos, nyt or rcv1"
            ))),
        }
    }
}

#[derive(Deserialize)]
struct RawLine {
    token: TokenField,
    label: Vec<String>,
}

/// Texts appear both as strings and as pre-split token lists.
#[derive(Deserialize)]
#[serde(untagged)]
enum TokenField {
    Text(String),
    Tokens(Vec<String>),
}

impl TokenField {
    fn into_text(self) -> String {
        match self {
            Self::Text(t) => t,
            Self::Tokens(t) => t.join(" "),
        }
    }
}

fn missing(format: DatasetFormat, dir: &Path, what: &str) -> CorpusError {
    let p = format.prefix();
    CorpusError::MissingRawData(format!(
        "{what} not found in {}. Obtain the {} corpus under its own license and place \
         {p}_train.json, {p}_val.json, {p}_test.json and {p}.taxonomy there \
         (one JSON object with \"token\" and \"label\" per line).",
        dir.display(),
        p.to_uppercase()
    ))
}

fn find(dir: &Path, names: &[String]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

/// Parses `parent<TAB>child<TAB>child...` lines rooted at `Root`.
pub fn parse_raw_taxonomy(text: &str) -> Result<LabelHierarchy, CorpusError> {
    let mut edges: Vec<(Option<&str>, &str)> = Vec::new();
    for line in text.lines() {
        let mut fields = line.split('\t').map(str::trim).filter(|f| !f.is_empty());
        let Some(parent) = fields.next() else { continue };
        let parent = (!parent.eq_ignore_ascii_case("root")).then_some(parent);
        for child in fields {
            edges.push((parent, child));
        }
    }
    Ok(LabelHierarchy::from_edges(&edges)?)
}

fn read_split(path: &Path, h: &LabelHierarchy, split: &str) -> Result<Vec<Sample>, CorpusError> {
    let shown = path.display().to_string();
    let reader = BufReader::new(File::open(path).map_err(|source| CorpusError::Io {
        path: shown.clone(),
        source,
    })?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
            path: shown.clone(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        let mut labels = LabelSet::new();
        for name in &raw.label {
            let id = h.id(name).map_err(|_| CorpusError::UnknownLabel {
                path: shown.clone(),
                line: n + 1,
                label: name.clone(),
            })?;
            labels.insert(id);
        }
        if labels.is_empty() {
            return Err(CorpusError::MalformedLine {
                path: shown.clone(),
                line: n + 1,
                reason: "no labels".into(),
            });
        }
        out.push(Sample {
            id: format!("{split}-{:07}", out.len()),
            text: raw.token.into_text(),
            labels: h.closure(&labels)?,
        });
    }
    Ok(out)
}

/// Converts a raw corpus directory. Returns the dataset plus a list of
/// discrepancies against the published statistics (empty when they match).
pub fn adapt(format: DatasetFormat, raw: impl AsRef<Path>) -> Result<(Dataset, Vec<String>), CorpusError> {
    let dir = raw.as_ref();
    let p = format.prefix();
    let tax = find(
        dir,
        &[format!("{p}.taxonomy"), format!("{p}.taxnomy"), "taxonomy".into()],
    )
    .ok_or_else(|| missing(format, dir, "taxonomy file"))?;
    let text = std::fs::read_to_string(&tax).map_err(|source| CorpusError::Io {
        path: tax.display().to_string(),
        source,
    })?;
    let hierarchy = parse_raw_taxonomy(&text)?;
    let train_path = find(dir, &[format!("{p}_train.json")]).ok_or_else(|| missing(format, dir, "train split"))?;
    let dev_path = find(dir, &[format!("{p}_val.json"), format!("{p}_dev.json")])
        .ok_or_else(|| missing(format, dir, "validation split"))?;
    let test_path = find(dir, &[format!("{p}_test.json")]).ok_or_else(|| missing(format, dir, "test split"))?;
    let ds = Dataset {
        train: read_split(&train_path, &hierarchy, "train")?,
        dev: read_split(&dev_path, &hierarchy, "dev")?,
        test: read_split(&test_path, &hierarchy, "test")?,
        hierarchy,
    };
    let stats = ds.stats()?;
    let reference = format.reference();
    let mut issues = Vec::new();
    if stats.labels != reference.labels {
        issues.push(format!("|H| = {}, published {}", stats.labels, reference.labels));
    }
    if stats.depth != reference.depth {
        issues.push(format!("D = {}, published {}", stats.depth, reference.depth));
    }
    if stats.sizes() != reference.sizes {
        issues.push(format!(
            "split sizes {:?}, published {:?}",
            stats.sizes(),
            reference.sizes
        ));
    }
    for issue in &issues {
        log::warn!("{p}: {issue}");
    }
    Ok((ds, issues))
}
