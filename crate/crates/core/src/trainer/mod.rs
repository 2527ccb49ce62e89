//! Training loop: teacher-forced windows of `micro_batch * accumulation_steps`
//! examples, AdamW with separate encoder and decoder rates, reduce-on-plateau
//! with encoder freezing, early stopping and checkpointing.
//!
//! Every accumulation window is one optimizer step, and its loss is the loss
//! of one batch holding all the window's examples. Splitting a window into
//! micro-batches therefore never changes the update. Each sample's dropout
//! stream is derived from `(seed, epoch, position in epoch)`, and per-sample
//! gradients are reduced in a fixed order, so results do not depend on the
//! number of worker threads.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::loss::{sample_term, LossConfig, Window};
use crate::model::{mix_seed, Classifier, Example, Model};
use crate::numerics::{Array, GradStore, ParamGroup, Tape};

pub use optim::{AdamW, AdamWConfig};
pub use schedule::{EarlyStop, Plateau};

/// Samples per parallel gradient chunk. Fixed so that the reduction tree,
/// and hence the rounding, is the same for any thread count.
pub const GRAD_CHUNK: usize = 4;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at epoch {epoch}, window {window}: {detail}")]
    NonFiniteLoss {
        epoch: u32,
        window: usize,
        loss: f64,
        detail: String,
    },
    #[error("{0} split is empty")]
    EmptyCorpus(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// Loss used for the per-epoch validation metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValLoss {
    /// The configured training loss.
    #[default]
    Training,
    /// Unmodulated cross-entropy with the configured smoothing.
    PlainCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub plateau_patience: u32,
    pub plateau_factor: f64,
    /// Minimum decrease of the validation loss that counts as improvement.
    pub improvement_threshold: f64,
    /// The encoder is frozen once its rate falls below this.
    pub encoder_freeze_threshold: f64,
    pub early_stop_patience: u32,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub max_epochs: u32,
    pub seed: u64,
    pub val_loss: ValLoss,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 5e-5,
            lr_decoder: 3e-4,
            plateau_patience: 3,
            plateau_factor: 0.1,
            improvement_threshold: 1e-6,
            encoder_freeze_threshold: 5e-7,
            early_stop_patience: 10,
            micro_batch: 32,
            accumulation_steps: 2,
            max_epochs: 30,
            seed: 0,
            val_loss: ValLoss::Training,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        let positive = [
            self.lr_encoder,
            self.lr_decoder,
            self.plateau_factor,
            self.encoder_freeze_threshold,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("learning rates, plateau factor and freeze threshold must be positive");
        }
        if self.plateau_factor >= 1.0 {
            return bad("plateau_factor must be below 1");
        }
        if self.improvement_threshold.is_nan() || self.improvement_threshold < 0.0 {
            return bad("improvement_threshold must be non-negative");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patiences must be positive");
        }
        if self.micro_batch == 0 || self.accumulation_steps == 0 {
            return bad("micro_batch and accumulation_steps must be at least 1");
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || o.eps.is_nan()
            || o.eps <= 0.0
            || o.weight_decay.is_nan()
            || o.weight_decay < 0.0
        {
            return bad("optimizer settings out of range");
        }
        Ok(())
    }

    /// Examples per optimizer step.
    pub fn window(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rates in effect during the epoch.
    pub lr_enc: f64,
    pub lr_dec: f64,
    /// Whether the encoder was frozen during the epoch.
    pub frozen: bool,
    /// Seconds spent on the epoch, validation included.
    pub wall_time: f64,
}

/// Everything besides parameters and optimizer moments that a resumed run
/// needs in order to continue exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u32,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub frozen: bool,
    pub stopped: bool,
    pub best_val: Option<f64>,
    pub best_epoch: u32,
    pub plateau: Plateau,
    pub early_stop: EarlyStop,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            lr_encoder: cfg.lr_encoder,
            lr_decoder: cfg.lr_decoder,
            frozen: false,
            stopped: false,
            best_val: None,
            best_epoch: 0,
            plateau: Plateau::new(cfg.plateau_patience, cfg.plateau_factor, cfg.improvement_threshold),
            early_stop: EarlyStop::new(cfg.early_stop_patience, cfg.improvement_threshold),
            history: Vec::new(),
        }
    }
}

/// Loss sum, target count and, when requested, gradients of one sample's
/// summed loss. `rng_seed` drives dropout in training mode.
fn sample_pass(
    model: &Model,
    ex: &Example,
    loss: &LossConfig,
    train: bool,
    rng_seed: u64,
    sink: Option<&mut GradStore>,
) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut tape = Tape::with_params(&model.store);
    let (inputs, targets) = ex.teacher_forcing();
    let logits = model.logits(&mut tape, &ex.input, inputs, train, &mut rng, None)?;
    let term = sample_term(&mut tape, logits, targets, loss)?;
    if let Some(sink) = sink {
        tape.backward_seeded(term.var, 1.0, sink)?;
    }
    Ok((term.sum, term.count))
}

/// Gradient of the summed per-position losses over `examples`, plus the
/// window totals. Multiply by [`Window::seed`] to get the gradient of the
/// window loss.
pub fn window_gradient(
    model: &Model,
    examples: &[&Example],
    rng_seeds: &[u64],
    loss: &LossConfig,
    train: bool,
) -> Result<(GradStore, Window)> {
    debug_assert_eq!(examples.len(), rng_seeds.len());
    let chunks: Vec<Result<(GradStore, Window)>> = examples
        .par_chunks(GRAD_CHUNK)
        .zip(rng_seeds.par_chunks(GRAD_CHUNK))
        .map(|(exs, seeds)| {
            let mut sink = GradStore::new();
            let mut w = Window::default();
            for (ex, &s) in exs.iter().zip(seeds) {
                let (sum, count) = sample_pass(model, ex, loss, train, s, Some(&mut sink))?;
                w.sum += sum;
                w.count += count;
            }
            Ok((sink, w))
        })
        .collect();
    let mut total = GradStore::new();
    let mut window = Window::default();
    for chunk in chunks {
        let (g, w) = chunk?;
        total.merge(g);
        window.sum += w.sum;
        window.count += w.count;
    }
    Ok((total, window))
}

/// Mean validation loss: examples are taken in order in windows of
/// `window` samples, and the per-window losses are averaged. Eval mode, so
/// repeated calls agree exactly.
pub fn evaluate_loss(model: &Model, examples: &[Example], loss: &LossConfig, window: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus("validation").into());
    }
    let window = window.max(1);
    let terms: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| sample_pass(model, ex, loss, false, 0, None))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut windows = 0usize;
    for chunk in terms.chunks(window) {
        let mut w = Window::default();
        for &(sum, count) in chunk {
            w.sum += sum;
            w.count += count;
        }
        total += w.loss(loss)?;
        windows += 1;
    }
    Ok(total / windows as f64)
}

fn grad_norm(model: &Model, group: ParamGroup) -> f64 {
    model
        .store
        .iter()
        .filter(|(_, p)| p.group == group)
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Owns the classifier during training. Call [`Trainer::finish`] to get it
/// back with the best validation parameters.
pub struct Trainer {
    clf: Classifier,
    optimizer: AdamW,
    state: TrainState,
    train: Vec<Example>,
    dev: Vec<Example>,
    best_params: Option<Vec<Array>>,
    out_dir: Option<PathBuf>,
    grad_norms: [f64; 2],
}

impl Trainer {
    /// Starts a fresh run. With `out_dir` set, the log and the best and
    /// last checkpoints are written there.
    pub fn new(clf: Classifier, dataset: &Dataset, out_dir: Option<&Path>) -> Result<Self> {
        let state = TrainState::new(&clf.config.train);
        let optimizer = AdamW::new(&clf.model.store, clf.config.train.optimizer.clone());
        Self::assemble(clf, optimizer, state, dataset, out_dir, None)
    }

    /// Continues from a checkpoint written by a previous run.
    pub fn resume(checkpoint_dir: &Path, dataset: &Dataset, out_dir: Option<&Path>) -> Result<Self> {
        let ckpt = checkpoint::load(checkpoint_dir)?;
        let (state, optimizer) = ckpt
            .training
            .ok_or_else(|| Error::Checkpoint(format!("{} holds no training state", checkpoint_dir.display())))?;
        let best = match out_dir.map(|d| d.join(BEST_DIR)) {
            Some(b) if b.is_dir() => Some(
                checkpoint::load(&b)?
                    .classifier
                    .model
                    .store
                    .iter()
                    .map(|(_, p)| p.value.clone())
                    .collect(),
            ),
            _ => None,
        };
        Self::assemble(ckpt.classifier, optimizer, state, dataset, out_dir, best)
    }

    fn assemble(
        mut clf: Classifier,
        optimizer: AdamW,
        state: TrainState,
        dataset: &Dataset,
        out_dir: Option<&Path>,
        best_params: Option<Vec<Array>>,
    ) -> Result<Self> {
        clf.config.train.validate()?;
        if dataset.train.is_empty() {
            return Err(TrainError::EmptyCorpus("train").into());
        }
        if dataset.dev.is_empty() {
            return Err(TrainError::EmptyCorpus("dev").into());
        }
        clf.model.store.set_group_trainable(ParamGroup::Encoder, !state.frozen);
        let train = clf.prepare(&dataset.train, 0)?;
        let dev = clf.prepare(&dataset.dev, 1)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        Ok(Self {
            clf,
            optimizer,
            state,
            train,
            dev,
            best_params,
            out_dir: out_dir.map(Path::to_path_buf),
            grad_norms: [0.0; 2],
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn classifier(&self) -> &Classifier {
        &self.clf
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    /// Gradient norm of the last step for a parameter group.
    pub fn last_grad_norm(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.grad_norms[0],
            ParamGroup::Decoder => self.grad_norms[1],
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.clf.config.train.max_epochs
    }

    fn loss_config(&self) -> &LossConfig {
        &self.clf.config.loss
    }

    /// Current mean validation loss under the configured validation loss.
    pub fn validation_loss(&self) -> Result<f64> {
        let cfg = match self.clf.config.train.val_loss {
            ValLoss::Training => self.loss_config().clone(),
            ValLoss::PlainCe => LossConfig::plain(self.loss_config().smoothing),
        };
        evaluate_loss(&self.clf.model, &self.dev, &cfg, self.clf.config.train.window())
    }

    /// One optimizer step on the examples at `indices`; `positions` are
    /// their positions within the epoch. Returns the window loss.
    fn step(
        &mut self,
        epoch: u32,
        window_index: usize,
        indices: &[usize],
        positions: std::ops::Range<usize>,
    ) -> Result<f64> {
        let seed = self.clf.config.train.seed;
        let examples: Vec<&Example> = indices.iter().map(|&i| &self.train[i]).collect();
        let seeds: Vec<u64> = positions.map(|p| mix_seed(&[seed, epoch as u64, p as u64])).collect();
        let loss_cfg = self.clf.config.loss.clone();
        let (grads, window) = window_gradient(&self.clf.model, &examples, &seeds, &loss_cfg, true)?;
        let loss = window.loss(&loss_cfg)?;
        let scale = window.seed(&loss_cfg)? as f32;
        let non_finite = |detail: &str| TrainError::NonFiniteLoss {
            epoch,
            window: window_index,
            loss,
            detail: detail.to_string(),
        };
        if !loss.is_finite() {
            return Err(non_finite("loss").into());
        }
        let store = &mut self.clf.model.store;
        store.zero_grad();
        for (id, g) in grads.params() {
            let p = store.get_mut(id);
            for (d, &s) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *d = s * scale;
            }
            if !p.grad.is_finite() {
                return Err(non_finite(&format!("gradient of {}", p.name)).into());
            }
        }
        self.grad_norms = [
            grad_norm(&self.clf.model, ParamGroup::Encoder),
            grad_norm(&self.clf.model, ParamGroup::Decoder),
        ];
        self.optimizer
            .step(&mut self.clf.model.store, self.state.lr_encoder, self.state.lr_decoder);
        Ok(loss)
    }

    /// Trains one epoch, validates, updates the schedule and writes the log
    /// line and checkpoints.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let cfg = self.clf.config.train.clone();
        let epoch = self.state.epoch + 1;
        let (lr_enc, lr_dec, frozen) = (self.state.lr_encoder, self.state.lr_decoder, self.state.frozen);

        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[
            cfg.seed,
            0x5F,
            epoch as u64,
        ])));
        let window = cfg.window();
        let mut train_total = 0.0;
        let mut windows = 0usize;
        for (w, chunk) in order.chunks(window).enumerate() {
            let start = w * window;
            train_total += self.step(epoch, w, chunk, start..start + chunk.len())?;
            windows += 1;
        }
        let train_loss = train_total / windows as f64;
        let val_loss = self.validation_loss()?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                window: 0,
                loss: val_loss,
                detail: "validation loss".into(),
            }
            .into());
        }

        let st = &mut self.state;
        st.epoch = epoch;
        let improved = st.best_val.is_none_or(|b| val_loss < b);
        if improved {
            st.best_val = Some(val_loss);
            st.best_epoch = epoch;
        }
        if st.plateau.step(val_loss) {
            st.lr_encoder *= cfg.plateau_factor;
            st.lr_decoder *= cfg.plateau_factor;
            log::info!(
                "epoch {epoch}: learning rates reduced to {:e} / {:e}",
                st.lr_encoder,
                st.lr_decoder
            );
            if !st.frozen && st.lr_encoder < cfg.encoder_freeze_threshold {
                st.frozen = true;
                log::info!("epoch {epoch}: encoder frozen");
            }
        }
        if st.early_stop.step(val_loss) {
            st.stopped = true;
        }
        let frozen_now = st.frozen;
        self.clf
            .model
            .store
            .set_group_trainable(ParamGroup::Encoder, !frozen_now);
        if improved {
            self.best_params = Some(self.clf.model.store.iter().map(|(_, p)| p.value.clone()).collect());
        }

        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr_enc,
            lr_dec,
            frozen,
            wall_time: started.elapsed().as_secs_f64(),
        };
        self.state.history.push(record.clone());
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} ({:.1}s)",
            record.wall_time
        );
        if let Some(dir) = self.out_dir.clone() {
            self.write_log(&dir, &record)?;
            if improved {
                checkpoint::save(&dir.join(BEST_DIR), &self.clf, Some((&self.state, &self.optimizer)))?;
            }
            checkpoint::save(&dir.join(LAST_DIR), &self.clf, Some((&self.state, &self.optimizer)))?;
        }
        Ok(record)
    }

    fn write_log(&self, dir: &Path, record: &EpochRecord) -> Result<()> {
        let path = dir.join(LOG_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(Error::io(&path))?;
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(f, "{line}").map_err(Error::io(&path))
    }

    /// Runs epochs until early stopping or `max_epochs`.
    pub fn run(&mut self) -> Result<&[EpochRecord]> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(&self.state.history)
    }

    /// The classifier with the best-validation parameters restored, and the
    /// final training state.
    pub fn finish(mut self) -> (Classifier, TrainState) {
        if let Some(best) = self.best_params.take() {
            for ((_, p), v) in self.clf.model.store.iter_mut().zip(best) {
                p.value = v;
            }
        }
        self.clf.model.store.set_group_trainable(ParamGroup::Encoder, true);
        (self.clf, self.state)
    }
}

/// Builds, trains and returns a classifier in one call.
pub fn train(
    config: &crate::config::RunConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(Classifier, TrainState)> {
    let clf = Classifier::build(config, dataset)?;
    let mut t = Trainer::new(clf, dataset, out_dir)?;
    t.run()?;
    Ok(t.finish())
}
