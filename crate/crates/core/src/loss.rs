//! Focal cross-entropy over teacher-forced label sequences.
//!
//! Training accumulates several samples into one window before a parameter
//! update. Each sample contributes a [`SampleTerm`] (sum of per-position
//! losses plus the number of scored positions); the window then combines the
//! terms and yields both the loss value and the backward seed for every
//! sample's tape.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label_codec::PAD;
use crate::numerics::ops::{self, focal_modulated, focal_modulated_grad};
use crate::numerics::{Array, NumericsError, Tape, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("gamma must be finite and non-negative, got {0}")]
    InvalidGamma(f64),
    #[error("smoothing must lie in [0, 1), got {0}")]
    InvalidSmoothing(f32),
    #[error("unknown loss variant {0:?}")]
    UnknownVariant(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// One modulation of the mean cross-entropy over the whole window.
    #[default]
    FocalBatch,
    /// Modulation of each position's cross-entropy before averaging.
    FocalPerToken,
    PlainCe,
}

impl LossVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FocalBatch => "focal-batch",
            Self::FocalPerToken => "focal-per-token",
            Self::PlainCe => "plain-ce",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Self::FocalBatch, Self::FocalPerToken, Self::PlainCe]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| LossError::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub gamma: f64,
    pub smoothing: f32,
    pub ignore_id: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::FocalBatch,
            gamma: 2.0,
            smoothing: 0.1,
            ignore_id: PAD,
        }
    }
}

impl LossConfig {
    pub fn plain(smoothing: f32) -> Self {
        Self {
            variant: LossVariant::PlainCe,
            smoothing,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(LossError::InvalidGamma(self.gamma));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(LossError::InvalidSmoothing(self.smoothing));
        }
        Ok(())
    }
}

/// Loss of one `T x V` logits block against its targets.
pub fn compute(logits: &Array, targets: &[u32], cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    match cfg.variant {
        LossVariant::PlainCe => Ok(ops::cross_entropy_smoothed(
            logits,
            targets,
            cfg.smoothing,
            cfg.ignore_id,
        )?),
        LossVariant::FocalBatch => {
            let ce = ops::cross_entropy_smoothed(logits, targets, cfg.smoothing, cfg.ignore_id)?;
            Ok(focal_modulated(ce, cfg.gamma))
        }
        LossVariant::FocalPerToken => {
            let (per_pos, count) = ops::smoothed_nll_rows(logits, targets, cfg.smoothing, cfg.ignore_id)?;
            if count == 0 {
                return Err(NumericsError::AllIgnored.into());
            }
            let total: f64 = per_pos.iter().map(|&c| focal_modulated(c, cfg.gamma)).sum();
            Ok(total / count as f64)
        }
    }
}

/// A sample's contribution to a window: `var` is a scalar on the sample's
/// tape whose value is `sum`.
#[derive(Clone, Copy, Debug)]
pub struct SampleTerm {
    pub var: Var,
    pub sum: f64,
    pub count: usize,
}

/// Records the per-sample loss sum on `tape`. Per-token modulation happens
/// here; batch modulation happens in [`Window`].
pub fn sample_term(
    tape: &mut Tape<'_>,
    logits: Var,
    targets: &[u32],
    cfg: &LossConfig,
) -> Result<SampleTerm, LossError> {
    let count = targets.iter().filter(|&&t| t != cfg.ignore_id).count();
    let nll = tape.smoothed_nll(logits, targets, cfg.smoothing, cfg.ignore_id)?;
    let per_pos = match cfg.variant {
        LossVariant::FocalPerToken => tape.focal(nll, cfg.gamma as f32),
        _ => nll,
    };
    let sum = tape.value(per_pos).data().iter().map(|&v| v as f64).sum();
    let var = tape.sum(per_pos);
    Ok(SampleTerm { var, sum, count })
}

/// Running totals over one accumulation window.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Window {
    pub sum: f64,
    pub count: usize,
}

impl Window {
    pub fn add(&mut self, term: &SampleTerm) {
        self.sum += term.sum;
        self.count += term.count;
    }

    /// Mean of the per-position terms.
    pub fn mean(&self) -> Result<f64, LossError> {
        if self.count == 0 {
            return Err(NumericsError::AllIgnored.into());
        }
        Ok(self.sum / self.count as f64)
    }

    pub fn loss(&self, cfg: &LossConfig) -> Result<f64, LossError> {
        let m = self.mean()?;
        Ok(match cfg.variant {
            LossVariant::FocalBatch => focal_modulated(m, cfg.gamma),
            _ => m,
        })
    }

    /// d(window loss) / d(sample sum): the same for every sample.
    pub fn seed(&self, cfg: &LossConfig) -> Result<f64, LossError> {
        let m = self.mean()?;
        let outer = match cfg.variant {
            LossVariant::FocalBatch => focal_modulated_grad(m, cfg.gamma),
            _ => 1.0,
        };
        Ok(outer / self.count as f64)
    }
}
