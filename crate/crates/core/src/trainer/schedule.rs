use serde::{Deserialize, Serialize};

/// A value counts as an improvement when it is below the best seen so far by
/// at least `threshold`.
fn improves(best: Option<f64>, value: f64, threshold: f64) -> bool {
    best.is_none_or(|b| value < b - threshold)
}

/// Reduce-on-plateau: after `patience` epochs without improvement the
/// learning rates are multiplied by `factor` and the counter restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub patience: u32,
    pub factor: f64,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: u32,
    pub reductions: u32,
}

impl Plateau {
    pub fn new(patience: u32, factor: f64, threshold: f64) -> Self {
        Self {
            patience,
            factor,
            threshold,
            best: None,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    /// Records one epoch's metric; returns true when the rates should drop.
    pub fn step(&mut self, metric: f64) -> bool {
        if improves(self.best, metric, self.threshold) {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            self.reductions += 1;
            return true;
        }
        false
    }
}

/// Stops training after `patience` epochs without improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: u32,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: u32,
}

impl EarlyStop {
    pub fn new(patience: u32, threshold: f64) -> Self {
        Self {
            patience,
            threshold,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's metric; returns true when training should stop.
    pub fn step(&mut self, metric: f64) -> bool {
        if improves(self.best, metric, self.threshold) {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.bad_epochs >= self.patience
    }
}
