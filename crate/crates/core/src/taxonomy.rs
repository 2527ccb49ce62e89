//! Label hierarchy: a forest of named labels hanging off an implicit root.
//!
//! The taxonomy file is UTF-8 text with one `parent<TAB>child` edge per line.
//! A parent field of `ROOT` declares a top-level label; `#` starts a comment.
//! When a file has no `ROOT` lines at all, labels that only ever appear as
//! parents are taken to be top-level.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved parent name for top-level declarations.
pub const ROOT: &str = "ROOT";

/// Index of a label in its hierarchy (file order of first appearance).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelId(pub u32);

impl LabelId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub type LabelSet = BTreeSet<LabelId>;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("cycle detected among labels: {0:?}")]
    CycleDetected(Vec<String>),
    #[error("label {0:?} has more than one parent")]
    MultipleParents(String),
    #[error("parent {0:?} is never declared")]
    UnknownParent(String),
    #[error("hierarchy has no labels")]
    EmptyHierarchy,
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("label set is not closed under ancestors: parent of {0:?} is missing")]
    NotClosureConsistent(String),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("reading taxonomy: {0}")]
    Io(#[from] std::io::Error),
}

/// Validated, immutable label tree.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelHierarchy {
    names: Vec<String>,
    index: HashMap<String, LabelId>,
    parent: Vec<Option<LabelId>>,
    level: Vec<u32>,
    children: Vec<Vec<LabelId>>,
    top_level: Vec<LabelId>,
}

impl LabelHierarchy {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let mut edges = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(parent), Some(child), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(TaxonomyError::MalformedLine {
                    line: n + 1,
                    reason: "expected `parent<TAB>child`".into(),
                });
            };
            let (parent, child) = (parent.trim(), child.trim());
            if parent.is_empty() || child.is_empty() || child == ROOT {
                return Err(TaxonomyError::MalformedLine {
                    line: n + 1,
                    reason: "empty field or ROOT used as a child".into(),
                });
            }
            let parent = (parent != ROOT).then_some(parent);
            edges.push((parent, child));
        }
        Self::from_edges(&edges)
    }

    /// Builds a hierarchy from `(parent, child)` edges; `None` parents are
    /// top-level declarations.
    pub fn from_edges(edges: &[(Option<&str>, &str)]) -> Result<Self, TaxonomyError> {
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, LabelId> = HashMap::new();
        let mut intern = |name: &str| -> LabelId {
            *index.entry(name.to_string()).or_insert_with(|| {
                names.push(name.to_string());
                LabelId(names.len() as u32 - 1)
            })
        };
        // Declared parent per label: None = not declared as child,
        // Some(None) = top-level, Some(Some(p)) = child of p.
        let mut declared: Vec<Option<Option<LabelId>>> = Vec::new();
        let mut edge_order: Vec<LabelId> = Vec::new();
        let has_root_lines = edges.iter().any(|(p, _)| p.is_none());
        for &(parent, child) in edges {
            let p = parent.map(&mut intern);
            let c = intern(child);
            let need = c.index().max(p.map_or(0, LabelId::index)) + 1;
            if declared.len() < need {
                declared.resize(need, None);
            }
            match declared[c.index()] {
                None => {
                    declared[c.index()] = Some(p);
                    edge_order.push(c);
                }
                Some(existing) if existing == p => {}
                Some(_) => return Err(TaxonomyError::MultipleParents(child.to_string())),
            }
        }
        declared.resize(names.len(), None);
        if names.is_empty() {
            return Err(TaxonomyError::EmptyHierarchy);
        }

        let n = names.len();
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut top_level = Vec::new();
        for (i, d) in declared.iter().enumerate() {
            match d {
                Some(Some(p)) => parent[i] = Some(*p),
                Some(None) => {}
                None if has_root_lines => return Err(TaxonomyError::UnknownParent(names[i].clone())),
                None => top_level.push(LabelId(i as u32)),
            }
        }
        // Children and explicitly declared top-level labels follow file order.
        for &c in &edge_order {
            match parent[c.index()] {
                Some(p) => children[p.index()].push(c),
                None => top_level.push(c),
            }
        }
        top_level.sort();

        let mut level = vec![0u32; n];
        let mut queue: VecDeque<LabelId> = top_level.iter().copied().collect();
        for &t in &top_level {
            level[t.index()] = 1;
        }
        while let Some(id) = queue.pop_front() {
            for &c in &children[id.index()] {
                level[c.index()] = level[id.index()] + 1;
                queue.push_back(c);
            }
        }
        let unreachable: Vec<String> = (0..n).filter(|&i| level[i] == 0).map(|i| names[i].clone()).collect();
        if !unreachable.is_empty() {
            return Err(TaxonomyError::CycleDetected(unreachable));
        }

        Ok(Self {
            names,
            index,
            parent,
            level,
            children,
            top_level,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = LabelId> + '_ {
        (0..self.names.len() as u32).map(LabelId)
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.names[id.index()]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Result<LabelId, TaxonomyError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TaxonomyError::UnknownLabel(name.to_string()))
    }

    pub fn contains(&self, id: LabelId) -> bool {
        id.index() < self.names.len()
    }

    fn check(&self, id: LabelId) -> Result<(), TaxonomyError> {
        if self.contains(id) {
            Ok(())
        } else {
            Err(TaxonomyError::UnknownLabel(format!("#{}", id.0)))
        }
    }

    /// `None` for top-level labels.
    pub fn parent(&self, id: LabelId) -> Option<LabelId> {
        self.parent[id.index()]
    }

    /// Depth below the virtual root; top-level labels are level 1.
    pub fn level(&self, id: LabelId) -> u32 {
        self.level[id.index()]
    }

    pub fn children(&self, id: LabelId) -> &[LabelId] {
        &self.children[id.index()]
    }

    pub fn top_level(&self) -> &[LabelId] {
        &self.top_level
    }

    pub fn max_depth(&self) -> u32 {
        self.level.iter().copied().max().unwrap_or(0)
    }

    pub fn is_leaf(&self, id: LabelId) -> bool {
        self.children[id.index()].is_empty()
    }

    /// Parent, grandparent, ... up to (excluding) the virtual root.
    pub fn ancestors(&self, id: LabelId) -> Result<Vec<LabelId>, TaxonomyError> {
        self.check(id)?;
        let mut out = Vec::new();
        let mut cur = self.parent(id);
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent(p);
        }
        Ok(out)
    }

    /// The set together with every ancestor of its members.
    pub fn closure(&self, labels: &LabelSet) -> Result<LabelSet, TaxonomyError> {
        let mut out = labels.clone();
        for &id in labels {
            self.check(id)?;
            let mut cur = self.parent(id);
            while let Some(p) = cur {
                if !out.insert(p) {
                    break;
                }
                cur = self.parent(p);
            }
        }
        Ok(out)
    }

    pub fn is_closed(&self, labels: &LabelSet) -> bool {
        labels
            .iter()
            .all(|&id| self.contains(id) && self.parent(id).is_none_or(|p| labels.contains(&p)))
    }

    /// Members of `labels` with no child inside `labels`. Does not require
    /// closure; see [`LabelHierarchy::minimize`] for the checked version.
    pub fn deepest_members(&self, labels: &LabelSet) -> LabelSet {
        let parents: BTreeSet<LabelId> = labels.iter().filter_map(|&id| self.parent(id)).collect();
        labels.iter().copied().filter(|id| !parents.contains(id)).collect()
    }

    /// Minimal subset whose closure reproduces `labels`. The input must be
    /// closed under ancestors.
    pub fn minimize(&self, labels: &LabelSet) -> Result<LabelSet, TaxonomyError> {
        for &id in labels {
            self.check(id)?;
            if let Some(p) = self.parent(id) {
                if !labels.contains(&p) {
                    return Err(TaxonomyError::NotClosureConsistent(self.name(id).to_string()));
                }
            }
        }
        Ok(self.deepest_members(labels))
    }

    /// Per-split summary: average labels, parent labels (members with a
    /// child in the set) and leaf labels (members without) per sample.
    pub fn stats<'a>(&self, samples: impl IntoIterator<Item = &'a LabelSet>) -> Result<HierarchyStats, TaxonomyError> {
        let mut count = 0usize;
        let (mut total, mut leaves) = (0usize, 0usize);
        for set in samples {
            for &id in set {
                self.check(id)?;
            }
            count += 1;
            total += set.len();
            leaves += self.deepest_members(set).len();
        }
        let avg = |x: usize| if count == 0 { 0.0 } else { x as f64 / count as f64 };
        Ok(HierarchyStats {
            label_count: self.len(),
            max_depth: self.max_depth(),
            samples: count,
            avg_labels: avg(total),
            avg_parent_labels: avg(total - leaves),
            avg_leaf_labels: avg(leaves),
            empty: count == 0,
        })
    }

    /// Serializes to the edge-list format, one line per label in id order.
    /// Parsing the result reproduces the same ids whenever every parent has
    /// a smaller id than its children.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for id in self.ids() {
            let parent = self.parent(id).map_or(ROOT, |p| self.name(p));
            let _ = writeln!(out, "{parent}\t{}", self.name(id));
        }
        out
    }
}

/// Dataset summary in the shape of a corpus statistics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HierarchyStats {
    pub label_count: usize,
    pub max_depth: u32,
    pub samples: usize,
    pub avg_labels: f64,
    pub avg_parent_labels: f64,
    pub avg_leaf_labels: f64,
    /// Set when the split had no samples and the averages are placeholders.
    pub empty: bool,
}
