//! Autoregressive generation of label sequences.
//!
//! Every step re-runs the decoder over the whole prefix (no key/value
//! cache), so the logits used at step `t` are by construction those of a
//! full forward pass over the first `t` tokens.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::EncodedText;
use crate::error::Result;
use crate::label_codec::{decode, TokenId, BOS, EOS};
use crate::model::{Classifier, Example, Model};
use crate::taxonomy::{LabelId, LabelSet};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Raw generator output: starts with BOS, ends with EOS unless
/// `hit_max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generated {
    pub tokens: Vec<TokenId>,
    pub hit_max_len: bool,
}

fn last_row_logits(model: &Model, enc: &EncodedText, tokens: &[TokenId]) -> Result<Vec<f32>> {
    let logits = model.decoder_logits(enc, tokens, None)?;
    Ok(logits.row(tokens.len() - 1).to_vec())
}

/// Greedy decoding of one sample, at most `capacity` tokens including BOS
/// and EOS.
pub fn greedy_decode(model: &Model, enc: &EncodedText, capacity: usize) -> Result<Generated> {
    let mut tokens = vec![BOS];
    while tokens.len() < capacity {
        let next = argmax(&last_row_logits(model, enc, &tokens)?);
        tokens.push(next);
        if next == EOS {
            return Ok(Generated {
                tokens,
                hit_max_len: false,
            });
        }
    }
    Ok(Generated {
        tokens,
        hit_max_len: true,
    })
}

/// Step-synchronous greedy decoding of a batch. A sample that has produced
/// EOS is padded from then on and takes no further part in the argmax. The
/// padding is tracked by `done`, never by token value: a generated PAD is an
/// ordinary (if poor) prediction and stays in the sequence.
pub fn greedy_decode_batch(model: &Model, encs: &[EncodedText], capacity: usize) -> Result<Vec<Generated>> {
    let mut seqs: Vec<Vec<TokenId>> = vec![vec![BOS]; encs.len()];
    let mut done = vec![false; encs.len()];
    for _ in 1..capacity {
        if done.iter().all(|&d| d) {
            break;
        }
        let next: Vec<Option<TokenId>> = seqs
            .par_iter()
            .zip(encs.par_iter())
            .zip(done.par_iter())
            .map(|((seq, enc), &finished)| {
                if finished {
                    return Ok(None);
                }
                Ok(Some(argmax(&last_row_logits(model, enc, seq)?)))
            })
            .collect::<Result<_>>()?;
        for ((seq, d), t) in seqs.iter_mut().zip(done.iter_mut()).zip(next) {
            if let Some(t) = t {
                seq.push(t);
                *d = t == EOS;
            }
        }
    }
    Ok(seqs
        .into_iter()
        .zip(done)
        .map(|(tokens, finished)| Generated {
            tokens,
            hit_max_len: !finished,
        })
        .collect())
}

/// Natural-log softmax in f64.
fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Score per generated token.
    pub fn normalized(&self) -> f64 {
        self.score / (self.tokens.len() - 1).max(1) as f64
    }
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone, Debug)]
pub struct BeamOutput {
    pub best: Generated,
    /// Final beam, best first by normalized score.
    pub beam: Vec<Hypothesis>,
    /// Largest beam held at any step.
    pub max_beam: usize,
}

/// Beam search keeping `width` hypotheses per step, ranked by total
/// log-probability; the final pick maximizes the per-token score. Width 1
/// reproduces [`greedy_decode`].
pub fn beam_search(model: &Model, enc: &EncodedText, capacity: usize, width: usize) -> Result<BeamOutput> {
    let width = width.max(1);
    let mut beam = vec![Hypothesis {
        tokens: vec![BOS],
        score: 0.0,
        finished: false,
    }];
    let mut max_beam = 1;
    for _ in 1..capacity {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates = Vec::new();
        for h in beam {
            if h.finished {
                candidates.push(h);
                continue;
            }
            let lp = log_softmax(&last_row_logits(model, enc, &h.tokens)?);
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &t in order.iter().take(width) {
                let mut tokens = h.tokens.clone();
                tokens.push(t as TokenId);
                candidates.push(Hypothesis {
                    tokens,
                    score: h.score + lp[t],
                    finished: t as TokenId == EOS,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(width);
        max_beam = max_beam.max(candidates.len());
        beam = candidates;
    }
    beam.sort_by(|a, b| b.normalized().total_cmp(&a.normalized()).then_with(|| rank(a, b)));
    let top = &beam[0];
    Ok(BeamOutput {
        best: Generated {
            tokens: top.tokens.clone(),
            hit_max_len: !top.finished,
        },
        beam,
        max_beam,
    })
}

pub fn beam_decode(model: &Model, enc: &EncodedText, capacity: usize, width: usize) -> Result<Generated> {
    Ok(beam_search(model, enc, capacity, width)?.best)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PredictionDiagnostics {
    /// Generation reached capacity without EOS.
    pub hit_max_len: bool,
    /// Labels emitted more than once; only the first occurrence is kept.
    pub repeated_labels_dropped: usize,
    /// Tokens that are neither labels nor separators inside the body.
    pub unknown_structure: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub tokens: Vec<TokenId>,
    /// Decoded label set; closed under ancestors for minimal orderings.
    pub labels: LabelSet,
    /// Label groups in emission order.
    pub levels: Vec<Vec<LabelId>>,
    pub diagnostics: PredictionDiagnostics,
}

impl Classifier {
    /// Turns generator output into a prediction with this classifier's
    /// codec settings.
    pub fn interpret(&self, generated: Generated) -> Prediction {
        let d = decode(
            &generated.tokens,
            &self.vocab,
            &self.hierarchy,
            self.config.codec.strategy,
        );
        Prediction {
            tokens: generated.tokens,
            labels: d.labels,
            levels: d.groups,
            diagnostics: PredictionDiagnostics {
                hit_max_len: generated.hit_max_len,
                repeated_labels_dropped: d.diagnostics.duplicate_labels,
                unknown_structure: d.diagnostics.unknown_ids,
            },
        }
    }

    /// Generates for encoded text with the configured beam width.
    pub fn generate(&self, enc: &EncodedText) -> Result<Generated> {
        match self.config.eval.beam_width {
            0 | 1 => greedy_decode(&self.model, enc, self.capacity()),
            w => beam_decode(&self.model, enc, self.capacity(), w),
        }
    }

    /// Prediction for raw text; `id` selects the stored state in
    /// precomputed mode.
    pub fn predict(&self, id: &str, text: &str) -> Result<Prediction> {
        let enc = self.model.encode(&self.input_for(id, text)?)?;
        Ok(self.interpret(self.generate(&enc)?))
    }

    /// Predictions for prepared examples, in order.
    pub fn predict_examples(&self, examples: &[Example]) -> Result<Vec<Prediction>> {
        examples
            .par_iter()
            .map(|ex| {
                let enc = self.model.encode(&ex.input)?;
                Ok(self.interpret(self.generate(&enc)?))
            })
            .collect()
    }
}
