//! Set-based Micro/Macro-F1 and a sequence-level error breakdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::error::Result;
use crate::inference::Prediction;
use crate::label_codec::{decode, OrderingStrategy, SymbolicVocab, TokenId, PAD};
use crate::model::{Classifier, Example};
use crate::taxonomy::{LabelHierarchy, LabelId, LabelSet};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{preds} predictions for {golds} gold sets")]
    LengthMismatch { preds: usize, golds: usize },
}

/// True positives, false positives and false negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    /// `2tp / (2tp + fp + fn)`, with 0/0 read as 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn check_lengths(preds: usize, golds: usize) -> Result<(), EvalError> {
    if preds == golds {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch { preds, golds })
    }
}

/// Per-label counts for every label seen in a prediction or gold set.
pub fn label_counts(preds: &[LabelSet], golds: &[LabelSet]) -> Result<BTreeMap<LabelId, Counts>, EvalError> {
    check_lengths(preds.len(), golds.len())?;
    let mut out: BTreeMap<LabelId, Counts> = BTreeMap::new();
    for (p, g) in preds.iter().zip(golds) {
        for &l in p {
            let c = out.entry(l).or_default();
            if g.contains(&l) {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        for &l in g.difference(p) {
            out.entry(l).or_default().fn_ += 1;
        }
    }
    Ok(out)
}

/// Micro-F1 over pooled counts and Macro-F1 as the unweighted mean of
/// per-label F1. Macro averages over labels present in some prediction or
/// gold set, or over `all_labels` when given (absent labels then score 0).
pub fn micro_macro_f1(
    preds: &[LabelSet],
    golds: &[LabelSet],
    all_labels: Option<&[LabelId]>,
) -> Result<(f64, f64), EvalError> {
    let counts = label_counts(preds, golds)?;
    Ok(f1_from_counts(&counts, all_labels))
}

fn f1_from_counts(counts: &BTreeMap<LabelId, Counts>, all_labels: Option<&[LabelId]>) -> (f64, f64) {
    let mut pooled = Counts::default();
    for c in counts.values() {
        pooled.add(*c);
    }
    let macro_f1 = match all_labels {
        Some(all) if !all.is_empty() => {
            all.iter().map(|l| counts.get(l).map_or(0.0, Counts::f1)).sum::<f64>() / all.len() as f64
        }
        _ if counts.is_empty() => 0.0,
        _ => counts.values().map(Counts::f1).sum::<f64>() / counts.len() as f64,
    };
    (pooled.f1(), macro_f1)
}

/// Extra breakdown of wrong samples for two-level hierarchies.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TwoLevelBuckets {
    pub child_wrong_parent_right: usize,
    /// Of `child_wrong_parent_right`: every predicted child sits under the
    /// gold parent.
    pub shared_parent: usize,
    pub parent_wrong_child_right: usize,
    pub both_wrong: usize,
    /// Same label set, different token sequence.
    pub same_labels: usize,
}

/// Every sample lands in exactly one of the four main buckets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ErrorBuckets {
    pub exact_match: usize,
    /// Wrong, with fewer tokens than the gold sequence.
    pub shorter: usize,
    pub longer: usize,
    pub equal_length_wrong: usize,
    pub two_level: Option<TwoLevelBuckets>,
}

impl ErrorBuckets {
    pub fn total(&self) -> usize {
        self.exact_match + self.shorter + self.longer + self.equal_length_wrong
    }
}

/// Tokens up to the first EOS (inclusive), padding removed.
fn active(tokens: &[TokenId]) -> Vec<TokenId> {
    let end = tokens
        .iter()
        .position(|&t| t == crate::label_codec::EOS)
        .map_or(tokens.len(), |p| p + 1);
    tokens[..end].iter().copied().filter(|&t| t != PAD).collect()
}

fn split_levels(labels: &LabelSet, h: &LabelHierarchy) -> (LabelSet, LabelSet) {
    labels.iter().partition(|&&l| h.level(l) == 1)
}

/// Compares generated and gold token sequences sample by sample.
pub fn error_taxonomy(
    preds: &[Vec<TokenId>],
    golds: &[Vec<TokenId>],
    vocab: &SymbolicVocab,
    h: &LabelHierarchy,
    strategy: OrderingStrategy,
) -> Result<ErrorBuckets, EvalError> {
    check_lengths(preds.len(), golds.len())?;
    let mut b = ErrorBuckets::default();
    let mut two = (h.max_depth() == 2).then(TwoLevelBuckets::default);
    for (p, g) in preds.iter().zip(golds) {
        let (p, g) = (active(p), active(g));
        if p == g {
            b.exact_match += 1;
            continue;
        }
        match p.len().cmp(&g.len()) {
            std::cmp::Ordering::Less => b.shorter += 1,
            std::cmp::Ordering::Greater => b.longer += 1,
            std::cmp::Ordering::Equal => b.equal_length_wrong += 1,
        }
        let Some(two) = two.as_mut() else { continue };
        let pl = decode(&p, vocab, h, strategy).labels;
        let gl = decode(&g, vocab, h, strategy).labels;
        if pl == gl {
            two.same_labels += 1;
            continue;
        }
        let (p_top, p_child) = split_levels(&pl, h);
        let (g_top, g_child) = split_levels(&gl, h);
        match (p_top == g_top, p_child == g_child) {
            (true, false) => {
                two.child_wrong_parent_right += 1;
                let gold_parents: LabelSet = g_child.iter().filter_map(|&c| h.parent(c)).collect();
                let shared = !p_child.is_empty()
                    && p_child
                        .iter()
                        .all(|&c| h.parent(c).is_some_and(|x| gold_parents.contains(&x)));
                two.shared_parent += usize::from(shared);
            }
            (false, true) => two.parent_wrong_child_right += 1,
            (false, false) => two.both_wrong += 1,
            (true, true) => unreachable!("label sets differ"),
        }
    }
    b.two_level = two;
    Ok(b)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelScore {
    pub label: String,
    pub level: u32,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Totals of per-prediction diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DiagnosticTotals {
    pub hit_max_len: usize,
    pub repeated_labels_dropped: usize,
    pub unknown_structure: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// Labels in the Macro-F1 mean.
    pub macro_labels: usize,
    pub per_label: Vec<LabelScore>,
    pub buckets: ErrorBuckets,
    pub diagnostics: DiagnosticTotals,
}

impl EvalReport {
    /// Human-readable summary followed by the per-label table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples        {}", self.samples);
        let _ = writeln!(s, "micro-F1       {:.4}", self.micro_f1);
        let _ = writeln!(s, "macro-F1       {:.4}  ({} labels)", self.macro_f1, self.macro_labels);
        let b = &self.buckets;
        let _ = writeln!(
            s,
            "sequences      exact {}  shorter {}  longer {}  equal-length wrong {}",
            b.exact_match, b.shorter, b.longer, b.equal_length_wrong
        );
        if let Some(t) = &b.two_level {
            let _ = writeln!(
                s,
                "two-level      child wrong/parent right {} (shared parent {})  parent wrong/child right {}  both wrong {}  same labels {}",
                t.child_wrong_parent_right, t.shared_parent, t.parent_wrong_child_right, t.both_wrong, t.same_labels
            );
        }
        let d = &self.diagnostics;
        let _ = writeln!(
            s,
            "diagnostics    hit max len {}  repeated labels {}  unknown structure {}",
            d.hit_max_len, d.repeated_labels_dropped, d.unknown_structure
        );
        let width = self.per_label.iter().map(|l| l.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            s,
            "\n{:<width$}  level     tp     fp     fn   prec    rec     f1",
            "label"
        );
        for l in &self.per_label {
            let _ = writeln!(
                s,
                "{:<width$}  {:>5} {:>6} {:>6} {:>6} {:>6.4} {:>6.4} {:>6.4}",
                l.label, l.level, l.counts.tp, l.counts.fp, l.counts.fn_, l.precision, l.recall, l.f1
            );
        }
        s
    }

    /// `key = value` lines for scripts.
    pub fn key_values(&self) -> String {
        let b = &self.buckets;
        let d = &self.diagnostics;
        let mut pairs: Vec<(String, String)> = vec![
            ("samples".into(), self.samples.to_string()),
            ("micro_f1".into(), self.micro_f1.to_string()),
            ("macro_f1".into(), self.macro_f1.to_string()),
            ("macro_labels".into(), self.macro_labels.to_string()),
            ("exact_match".into(), b.exact_match.to_string()),
            ("shorter".into(), b.shorter.to_string()),
            ("longer".into(), b.longer.to_string()),
            ("equal_length_wrong".into(), b.equal_length_wrong.to_string()),
            ("hit_max_len".into(), d.hit_max_len.to_string()),
            ("repeated_labels_dropped".into(), d.repeated_labels_dropped.to_string()),
            ("unknown_structure".into(), d.unknown_structure.to_string()),
        ];
        if let Some(t) = &b.two_level {
            pairs.extend([
                (
                    "child_wrong_parent_right".into(),
                    t.child_wrong_parent_right.to_string(),
                ),
                ("shared_parent".into(), t.shared_parent.to_string()),
                (
                    "parent_wrong_child_right".into(),
                    t.parent_wrong_child_right.to_string(),
                ),
                ("both_wrong".into(), t.both_wrong.to_string()),
                ("same_labels".into(), t.same_labels.to_string()),
            ]);
        }
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Scores predictions against examples.
pub fn report(clf: &Classifier, examples: &[Example], predictions: &[Prediction]) -> Result<EvalReport> {
    check_lengths(predictions.len(), examples.len())?;
    let preds: Vec<LabelSet> = predictions.iter().map(|p| p.labels.clone()).collect();
    let golds: Vec<LabelSet> = examples.iter().map(|e| e.labels.clone()).collect();
    let counts = label_counts(&preds, &golds)?;
    let h = &clf.hierarchy;
    let all: Vec<LabelId> = h.ids().collect();
    let scope = clf.config.eval.macro_all_labels.then_some(all.as_slice());
    let (micro_f1, macro_f1) = f1_from_counts(&counts, scope);
    let listed: Vec<LabelId> = match scope {
        Some(all) => all.to_vec(),
        None => counts.keys().copied().collect(),
    };
    let per_label = listed
        .iter()
        .map(|&l| {
            let c = counts.get(&l).copied().unwrap_or_default();
            LabelScore {
                label: h.name(l).to_string(),
                level: h.level(l),
                counts: c,
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
            }
        })
        .collect();
    let pred_seqs: Vec<Vec<TokenId>> = predictions.iter().map(|p| p.tokens.clone()).collect();
    let gold_seqs: Vec<Vec<TokenId>> = examples.iter().map(|e| e.target.active().to_vec()).collect();
    let buckets = error_taxonomy(&pred_seqs, &gold_seqs, &clf.vocab, h, clf.config.codec.strategy)?;
    let mut diagnostics = DiagnosticTotals::default();
    for p in predictions {
        diagnostics.hit_max_len += usize::from(p.diagnostics.hit_max_len);
        diagnostics.repeated_labels_dropped += p.diagnostics.repeated_labels_dropped;
        diagnostics.unknown_structure += p.diagnostics.unknown_structure;
    }
    Ok(EvalReport {
        samples: examples.len(),
        micro_f1,
        macro_f1,
        macro_labels: listed.len(),
        per_label,
        buckets,
        diagnostics,
    })
}

/// Predicts every example and scores the result.
pub fn evaluate(clf: &Classifier, examples: &[Example]) -> Result<(EvalReport, Vec<Prediction>)> {
    let predictions = clf.predict_examples(examples)?;
    Ok((report(clf, examples, &predictions)?, predictions))
}
