//! Samples, JSONL ingestion, and dataset directories.
//!
//! A dataset directory holds `taxonomy.tsv` plus `train.jsonl`, `dev.jsonl`
//! and `test.jsonl`, one `{"id", "text", "labels": [names]}` object per line.

pub mod adapters;
pub mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{HierarchyStats, LabelHierarchy, LabelSet, TaxonomyError};

pub const TAXONOMY_FILE: &str = "taxonomy.tsv";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: line {line}: {reason}")]
    MalformedLine { path: String, line: usize, reason: String },
    #[error("{path}: line {line}: unknown label {label:?}")]
    UnknownLabel { path: String, line: usize, label: String },
    #[error("{path}: line {line}: labels not closed under ancestors ({label:?} lacks its parent)")]
    NotClosed { path: String, line: usize, label: String },
    #[error("split {0:?} is empty")]
    EmptySplit(String),
    #[error("raw data not found: {0}")]
    MissingRawData(String),
    #[error("invalid synthetic config: {0}")]
    InvalidSynth(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    /// Closed under ancestors and non-empty.
    pub labels: LabelSet,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    id: String,
    text: String,
    labels: Vec<String>,
}

/// Per-file ingestion counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Samples whose label sets were closed by adding missing ancestors.
    pub auto_closed: usize,
    /// Unknown label names dropped in lenient mode.
    pub unknown_dropped: usize,
}

/// Reads one JSONL split. Lenient mode closes incomplete label sets and drops
/// unknown names; strict mode rejects both.
pub fn load_jsonl(
    path: impl AsRef<Path>,
    h: &LabelHierarchy,
    strict: bool,
) -> Result<(Vec<Sample>, LoadReport), CorpusError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut samples = Vec::new();
    let mut report = LoadReport::default();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
            path: shown.clone(),
            line: lineno,
            reason: e.to_string(),
        })?;
        let mut labels = LabelSet::new();
        for name in &parsed.labels {
            match h.id(name) {
                Ok(id) => {
                    labels.insert(id);
                }
                Err(_) if !strict => {
                    log::warn!("{shown}:{lineno}: dropping unknown label {name:?}");
                    report.unknown_dropped += 1;
                }
                Err(_) => {
                    return Err(CorpusError::UnknownLabel {
                        path: shown,
                        line: lineno,
                        label: name.clone(),
                    })
                }
            }
        }
        if labels.is_empty() {
            return Err(CorpusError::MalformedLine {
                path: shown,
                line: lineno,
                reason: "sample has no valid labels".into(),
            });
        }
        if !h.is_closed(&labels) {
            if strict {
                let orphan = labels
                    .iter()
                    .find(|&&l| h.parent(l).is_some_and(|p| !labels.contains(&p)))
                    .expect("open set has an orphan");
                return Err(CorpusError::NotClosed {
                    path: shown,
                    line: lineno,
                    label: h.name(*orphan).to_string(),
                });
            }
            log::warn!("{shown}:{lineno}: adding missing ancestors");
            labels = h.closure(&labels)?;
            report.auto_closed += 1;
        }
        samples.push(Sample {
            id: parsed.id,
            text: parsed.text,
            labels,
        });
    }
    Ok((samples, report))
}

/// Writes samples as JSONL; labels are listed shallowest level first.
pub fn save_jsonl(path: impl AsRef<Path>, samples: &[Sample], h: &LabelHierarchy) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for s in samples {
        let mut ids: Vec<_> = s.labels.iter().copied().collect();
        ids.sort_by_key(|&l| (h.level(l), l));
        let line = SampleLine {
            id: s.id.clone(),
            text: s.text.clone(),
            labels: ids.iter().map(|&l| h.name(l).to_string()).collect(),
        };
        let json = serde_json::to_string(&line).expect("sample serializes");
        writeln!(w, "{json}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub hierarchy: LabelHierarchy,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>, strict: bool) -> Result<Self, CorpusError> {
        let dir = dir.as_ref();
        let tax = dir.join(TAXONOMY_FILE);
        let text = std::fs::read_to_string(&tax).map_err(io_err(&tax))?;
        let hierarchy = LabelHierarchy::parse(&text)?;
        let mut splits = Vec::with_capacity(3);
        for name in SPLITS {
            let (samples, _) = load_jsonl(dir.join(format!("{name}.jsonl")), &hierarchy, strict)?;
            splits.push(samples);
        }
        let test = splits.pop().expect("three splits");
        let dev = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Self {
            hierarchy,
            train,
            dev,
            test,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tax = dir.join(TAXONOMY_FILE);
        std::fs::write(&tax, self.hierarchy.to_tsv()).map_err(io_err(&tax))?;
        for (name, samples) in SPLITS.iter().zip([&self.train, &self.dev, &self.test]) {
            save_jsonl(dir.join(format!("{name}.jsonl")), samples, &self.hierarchy)?;
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Option<&[Sample]> {
        match name {
            "train" => Some(&self.train),
            "dev" | "val" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    pub fn stats(&self) -> Result<DatasetStats, CorpusError> {
        let mut splits = Vec::new();
        for (name, samples) in SPLITS.iter().zip([&self.train, &self.dev, &self.test]) {
            let s = self.hierarchy.stats(samples.iter().map(|s| &s.labels))?;
            if s.empty {
                log::warn!("split {name} is empty; averages reported as 0");
            }
            splits.push(((*name).to_string(), s));
        }
        Ok(DatasetStats {
            labels: self.hierarchy.len(),
            depth: self.hierarchy.max_depth(),
            splits,
        })
    }
}

/// Statistics table row for a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub labels: usize,
    pub depth: u32,
    pub splits: Vec<(String, HierarchyStats)>,
}

impl DatasetStats {
    pub fn sizes(&self) -> Vec<usize> {
        self.splits.iter().map(|(_, s)| s.samples).collect()
    }

    /// Human-readable summary with `train/dev/test` averages.
    pub fn render(&self) -> String {
        let join =
            |f: &dyn Fn(&HierarchyStats) -> String| self.splits.iter().map(|(_, s)| f(s)).collect::<Vec<_>>().join("/");
        format!(
            "|H| {}  D {}  Avg(L) {}  Avg(PL) {}  Avg(LL) {}  sizes {}",
            self.labels,
            self.depth,
            join(&|s| format!("{:.2}", s.avg_labels)),
            join(&|s| format!("{:.2}", s.avg_parent_labels)),
            join(&|s| format!("{:.2}", s.avg_leaf_labels)),
            join(&|s| s.samples.to_string()),
        )
    }
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn h() -> LabelHierarchy {
        LabelHierarchy::parse("ROOT\tA\nA\tB\nROOT\tC\n").unwrap()
    }

    #[test]
    fn three_lines_three_samples() {
        let d = tempfile::tempdir().unwrap();
        let p = write(
            d.path(),
            "x.jsonl",
            "{\"id\":\"1\",\"text\":\"t\",\"labels\":[\"A\"]}\n{\"id\":\"2\",\"text\":\"t\",\"labels\":[\"A\",\"B\"]}\n\n{\"id\":\"3\",\"text\":\"t\",\"labels\":[\"C\"]}\n",
        );
        let (s, r) = load_jsonl(&p, &h(), true).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(r, LoadReport::default());
    }

    #[test]
    fn missing_parent_is_added_or_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = write(
            d.path(),
            "x.jsonl",
            "{\"id\":\"1\",\"text\":\"t\",\"labels\":[\"B\"]}\n",
        );
        let hh = h();
        let (s, r) = load_jsonl(&p, &hh, false).unwrap();
        assert_eq!(s[0].labels, [hh.id("A").unwrap(), hh.id("B").unwrap()].into());
        assert_eq!(r.auto_closed, 1);
        assert!(matches!(
            load_jsonl(&p, &hh, true),
            Err(CorpusError::NotClosed { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_label_handling() {
        let d = tempfile::tempdir().unwrap();
        let p = write(
            d.path(),
            "x.jsonl",
            "{\"id\":\"1\",\"text\":\"t\",\"labels\":[\"C\",\"Z\"]}\n",
        );
        assert!(matches!(
            load_jsonl(&p, &h(), true),
            Err(CorpusError::UnknownLabel { line: 1, .. })
        ));
        let (s, r) = load_jsonl(&p, &h(), false).unwrap();
        assert_eq!(s[0].labels.len(), 1);
        assert_eq!(r.unknown_dropped, 1);
    }

    #[test]
    fn malformed_json_reports_line() {
        let d = tempfile::tempdir().unwrap();
        let p = write(
            d.path(),
            "x.jsonl",
            "{\"id\":\"1\",\"text\":\"t\",\"labels\":[\"C\"]}\n{oops\n",
        );
        assert!(matches!(
            load_jsonl(&p, &h(), false),
            Err(CorpusError::MalformedLine { line: 2, .. })
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let hh = h();
        let mk = |id: &str, names: &[&str]| Sample {
            id: id.into(),
            text: format!("text {id}"),
            labels: names.iter().map(|n| hh.id(n).unwrap()).collect(),
        };
        let ds = Dataset {
            hierarchy: hh.clone(),
            train: vec![mk("a", &["A", "B"]), mk("b", &["C"])],
            dev: vec![mk("c", &["A"])],
            test: vec![],
        };
        let d = tempfile::tempdir().unwrap();
        ds.save(d.path()).unwrap();
        let again = Dataset::load(d.path(), true).unwrap();
        assert_eq!(again.train, ds.train);
        assert_eq!(again.dev, ds.dev);
        assert!(again.test.is_empty());
        let st = again.stats().unwrap();
        assert_eq!(st.sizes(), vec![2, 1, 0]);
        assert_eq!(st.splits[0].1.avg_labels, 1.5);
        assert!(st.splits[2].1.empty);
    }
}
