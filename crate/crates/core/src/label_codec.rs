//! Symbolic label vocabulary and label-set <-> token-sequence codec.
//!
//! Labels are renamed `[a_k]`, `k` being the label's index in its hierarchy.
//! Token ids 0..4 are specials; label `k` has token id `4 + k`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taxonomy::{LabelHierarchy, LabelId, LabelSet, TaxonomyError};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;
/// Level (or path) separator. Named `<unk>` in rendered sequences.
pub const SEP: TokenId = 3;
pub const FIRST_LABEL: TokenId = 4;

const SPECIAL_NAMES: [&str; 4] = ["<s>", "</s>", "<pad>", "<unk>"];

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("encoded length {needed} exceeds capacity {capacity}")]
    CapacityExceeded { needed: usize, capacity: usize },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("label map line {line}: {reason}")]
    LabelMap { line: usize, reason: String },
    #[error("unknown ordering strategy {0:?}")]
    UnknownStrategy(String),
    #[error("label map I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Decoder output vocabulary: four specials followed by one token per label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicVocab {
    /// Original label names; position `k` is symbol `[a_k]`.
    names: Vec<String>,
}

pub fn build_vocab(h: &LabelHierarchy) -> SymbolicVocab {
    SymbolicVocab {
        names: h.names().to_vec(),
    }
}

impl SymbolicVocab {
    pub fn size(&self) -> usize {
        FIRST_LABEL as usize + self.names.len()
    }

    pub fn label_count(&self) -> usize {
        self.names.len()
    }

    pub fn token_of(&self, label: LabelId) -> TokenId {
        debug_assert!(label.index() < self.names.len());
        FIRST_LABEL + label.0
    }

    pub fn label_of(&self, token: TokenId) -> Option<LabelId> {
        let k = token.checked_sub(FIRST_LABEL)?;
        ((k as usize) < self.names.len()).then_some(LabelId(k))
    }

    pub fn symbol(&self, label: LabelId) -> String {
        format!("[a_{}]", label.0)
    }

    pub fn original_name(&self, label: LabelId) -> &str {
        &self.names[label.index()]
    }

    /// Inverse of [`SymbolicVocab::symbol`].
    pub fn parse_symbol(&self, symbol: &str) -> Option<LabelId> {
        let k: u32 = symbol.strip_prefix("[a_")?.strip_suffix(']')?.parse().ok()?;
        ((k as usize) < self.names.len()).then_some(LabelId(k))
    }

    pub fn token_name(&self, token: TokenId) -> String {
        match SPECIAL_NAMES.get(token as usize) {
            Some(s) => (*s).to_string(),
            None => match self.label_of(token) {
                Some(l) => self.symbol(l),
                None => format!("<#{token}>"),
            },
        }
    }

    /// Space-separated rendering, e.g. `<s> [a_3] <unk> </s>`.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.token_name(t)).collect::<Vec<_>>().join(" ")
    }

    /// `symbolic<TAB>original-name` lines in id order.
    pub fn label_map(&self) -> String {
        let mut out = String::new();
        for (k, name) in self.names.iter().enumerate() {
            out.push_str(&format!("[a_{k}]\t{name}\n"));
        }
        out
    }

    pub fn parse_label_map(text: &str) -> Result<Self, CodecError> {
        let mut names = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| CodecError::LabelMap {
                line: n + 1,
                reason: reason.to_string(),
            };
            let (sym, name) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let expect = format!("[a_{}]", names.len());
            if sym != expect {
                return Err(bad(&format!("expected {expect}, found {sym}")));
            }
            names.push(name.to_string());
        }
        Ok(Self { names })
    }

    pub fn write_label_map(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        std::fs::write(path, self.label_map())?;
        Ok(())
    }

    pub fn read_label_map(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        Self::parse_label_map(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the label map; identifies id assignments across runs.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.label_map().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingStrategy {
    /// Level groups deepest first, each followed by a separator.
    #[default]
    ChildToParentLevelwise,
    /// Level groups shallowest first, each followed by a separator.
    ParentToChildLevelwise,
    /// Deepest-first flat list without separators.
    ChildToParentNoSep,
    /// One child-to-top path per deepest member, each followed by a separator.
    PathSeparated,
    /// Seeded random permutation without separators.
    Shuffled,
    /// Deepest members only, laid out like `ChildToParentLevelwise`;
    /// ancestors are restored on decode.
    MinimalChildrenLevelwise,
}

impl OrderingStrategy {
    pub const ALL: [OrderingStrategy; 6] = [
        Self::ChildToParentLevelwise,
        Self::ParentToChildLevelwise,
        Self::ChildToParentNoSep,
        Self::PathSeparated,
        Self::Shuffled,
        Self::MinimalChildrenLevelwise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ChildToParentLevelwise => "child-to-parent-levelwise",
            Self::ParentToChildLevelwise => "parent-to-child-levelwise",
            Self::ChildToParentNoSep => "child-to-parent-no-sep",
            Self::PathSeparated => "path-separated",
            Self::Shuffled => "shuffled",
            Self::MinimalChildrenLevelwise => "minimal-children-levelwise",
        }
    }

    /// Whether encoding consumes randomness.
    pub fn is_random(self) -> bool {
        self == Self::Shuffled
    }
}

impl fmt::Display for OrderingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OrderingStrategy {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| CodecError::UnknownStrategy(s.to_string()))
    }
}

/// Fixed-capacity token sequence: `BOS body EOS PAD*`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSequence {
    ids: Vec<TokenId>,
    mask: Vec<u8>,
    ordering: OrderingStrategy,
}

impl LabelSequence {
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// 1 on real tokens (including BOS, EOS and separators), 0 on padding.
    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn ordering(&self) -> OrderingStrategy {
        self.ordering
    }

    pub fn capacity(&self) -> usize {
        self.ids.len()
    }

    /// Number of real tokens, i.e. the index just past EOS.
    pub fn active_len(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }

    /// `BOS ... EOS` without padding.
    pub fn active(&self) -> &[TokenId] {
        &self.ids[..self.active_len()]
    }

    /// Structural invariants of an encoded sequence.
    pub fn is_well_formed(&self, vocab: &SymbolicVocab) -> bool {
        let n = self.active_len();
        if n < 2 || self.ids.len() != self.mask.len() || self.ids[0] != BOS || self.ids[n - 1] != EOS {
            return false;
        }
        let body = &self.ids[1..n - 1];
        let labels_ok = body.iter().all(|&t| t == SEP || vocab.label_of(t).is_some());
        let pad_ok = self.ids[n..].iter().all(|&t| t == PAD)
            && self.mask[..n].iter().all(|&m| m == 1)
            && self.mask[n..].iter().all(|&m| m == 0);
        let mut seen = BTreeSet::new();
        let unique = self.ordering == OrderingStrategy::PathSeparated
            || body.iter().filter(|&&t| t != SEP).all(|t| seen.insert(*t));
        labels_ok && pad_ok && unique
    }
}

/// Labels grouped by level, deepest first; siblings in descending id order.
fn level_groups(labels: &LabelSet, h: &LabelHierarchy) -> Vec<Vec<LabelId>> {
    let mut sorted: Vec<LabelId> = labels.iter().copied().collect();
    sorted.sort_by(|a, b| h.level(*b).cmp(&h.level(*a)).then(b.cmp(a)));
    let mut groups: Vec<Vec<LabelId>> = Vec::new();
    let mut last = None;
    for id in sorted {
        if last != Some(h.level(id)) {
            groups.push(Vec::new());
            last = Some(h.level(id));
        }
        groups.last_mut().expect("group pushed").push(id);
    }
    groups
}

fn levelwise(groups: &[Vec<LabelId>], vocab: &SymbolicVocab, out: &mut Vec<TokenId>) {
    for g in groups {
        out.extend(g.iter().map(|&l| vocab.token_of(l)));
        out.push(SEP);
    }
}

/// Sequence body (between BOS and EOS) for a label set.
pub fn body_tokens<R: Rng + ?Sized>(
    labels: &LabelSet,
    h: &LabelHierarchy,
    vocab: &SymbolicVocab,
    strategy: OrderingStrategy,
    rng: &mut R,
) -> Result<Vec<TokenId>, CodecError> {
    for &l in labels {
        if !h.contains(l) {
            return Err(TaxonomyError::UnknownLabel(format!("#{}", l.0)).into());
        }
    }
    let mut out = Vec::new();
    match strategy {
        OrderingStrategy::ChildToParentLevelwise => levelwise(&level_groups(labels, h), vocab, &mut out),
        OrderingStrategy::ParentToChildLevelwise => {
            let mut groups = level_groups(labels, h);
            groups.reverse();
            levelwise(&groups, vocab, &mut out);
        }
        OrderingStrategy::ChildToParentNoSep => {
            out.extend(level_groups(labels, h).iter().flatten().map(|&l| vocab.token_of(l)));
        }
        OrderingStrategy::PathSeparated => {
            let leaves = h.deepest_members(labels);
            let ordered: Vec<LabelId> = level_groups(&leaves, h).into_iter().flatten().collect();
            for leaf in ordered {
                out.push(vocab.token_of(leaf));
                for a in h.ancestors(leaf)? {
                    if labels.contains(&a) {
                        out.push(vocab.token_of(a));
                    }
                }
                out.push(SEP);
            }
        }
        OrderingStrategy::Shuffled => {
            let mut ids: Vec<TokenId> = labels.iter().map(|&l| vocab.token_of(l)).collect();
            ids.shuffle(rng);
            out = ids;
        }
        OrderingStrategy::MinimalChildrenLevelwise => {
            let minimal = h.minimize(labels)?;
            levelwise(&level_groups(&minimal, h), vocab, &mut out);
        }
    }
    Ok(out)
}

pub fn encode<R: Rng + ?Sized>(
    labels: &LabelSet,
    h: &LabelHierarchy,
    vocab: &SymbolicVocab,
    strategy: OrderingStrategy,
    capacity: usize,
    rng: &mut R,
) -> Result<LabelSequence, CodecError> {
    let body = body_tokens(labels, h, vocab, strategy, rng)?;
    let needed = body.len() + 2;
    if needed > capacity {
        return Err(CodecError::CapacityExceeded { needed, capacity });
    }
    let mut ids = Vec::with_capacity(capacity);
    ids.push(BOS);
    ids.extend(body);
    ids.push(EOS);
    let mut mask = vec![1u8; ids.len()];
    ids.resize(capacity, PAD);
    mask.resize(capacity, 0);
    Ok(LabelSequence {
        ids,
        mask,
        ordering: strategy,
    })
}

/// Sequence capacity from the level-wise sizing rule: labels plus one
/// separator per distinct level plus BOS/EOS, maximised over samples.
pub fn capacity_for<'a>(sets: impl IntoIterator<Item = &'a LabelSet>, h: &LabelHierarchy) -> usize {
    sets.into_iter()
        .map(|s| {
            let levels: BTreeSet<u32> = s.iter().map(|&l| h.level(l)).collect();
            s.len() + levels.len() + 2
        })
        .max()
        .unwrap_or(2)
}

/// Exact capacity needed to encode every set under `strategy`.
pub fn capacity_for_strategy<'a>(
    sets: impl IntoIterator<Item = &'a LabelSet>,
    h: &LabelHierarchy,
    strategy: OrderingStrategy,
) -> Result<usize, CodecError> {
    let mut best = 2;
    for s in sets {
        let body = match strategy {
            OrderingStrategy::ChildToParentNoSep | OrderingStrategy::Shuffled => s.len(),
            OrderingStrategy::ChildToParentLevelwise | OrderingStrategy::ParentToChildLevelwise => {
                s.len() + s.iter().map(|&l| h.level(l)).collect::<BTreeSet<_>>().len()
            }
            OrderingStrategy::PathSeparated => h
                .deepest_members(s)
                .iter()
                .map(|&leaf| {
                    2 + h
                        .ancestors(leaf)
                        .map_or(0, |a| a.iter().filter(|x| s.contains(x)).count())
                })
                .sum(),
            OrderingStrategy::MinimalChildrenLevelwise => {
                let m = h.minimize(s)?;
                m.len() + m.iter().map(|&l| h.level(l)).collect::<BTreeSet<_>>().len()
            }
        };
        best = best.max(body + 2);
    }
    Ok(best)
}

/// Irregularities seen while decoding model output.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DecodeDiagnostics {
    pub missing_bos: bool,
    pub missing_eos: bool,
    /// Ids outside the vocabulary, or BOS/PAD inside the body.
    pub unknown_ids: usize,
    pub duplicate_labels: usize,
}

impl DecodeDiagnostics {
    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub labels: LabelSet,
    /// Label groups as delimited by separators, in sequence order.
    pub groups: Vec<Vec<LabelId>>,
    pub diagnostics: DecodeDiagnostics,
}

/// Lenient decode of arbitrary token output.
pub fn decode(tokens: &[TokenId], vocab: &SymbolicVocab, h: &LabelHierarchy, strategy: OrderingStrategy) -> Decoded {
    let mut diag = DecodeDiagnostics::default();
    let body = match tokens.first() {
        Some(&BOS) => &tokens[1..],
        _ => {
            diag.missing_bos = true;
            tokens
        }
    };
    let body = match body.iter().position(|&t| t == EOS) {
        Some(end) => &body[..end],
        None => {
            diag.missing_eos = true;
            body
        }
    };
    let mut labels = LabelSet::new();
    let mut groups: Vec<Vec<LabelId>> = vec![Vec::new()];
    for &t in body {
        match t {
            SEP => groups.push(Vec::new()),
            PAD => {}
            _ => match vocab.label_of(t) {
                Some(l) => {
                    if labels.insert(l) {
                        groups.last_mut().expect("non-empty").push(l);
                    } else if strategy != OrderingStrategy::PathSeparated {
                        diag.duplicate_labels += 1;
                    }
                }
                None => diag.unknown_ids += 1,
            },
        }
    }
    groups.retain(|g| !g.is_empty());
    if strategy == OrderingStrategy::MinimalChildrenLevelwise {
        labels = h.closure(&labels).expect("decoded ids are in the vocabulary");
    }
    Decoded {
        labels,
        groups,
        diagnostics: diag,
    }
}
