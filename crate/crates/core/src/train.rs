//! Training loop, learning-rate schedule, validation split, early stopping
//! and grid search.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeRef, Tape};
use crate::error::{Error, Result};
use crate::models::Network;
use crate::optim::{sgd_step, SgdSettings};
use crate::relabel::{LabeledDataset, Split};
use crate::report::TraceRow;
use crate::rng;
use crate::tensor::Tensor;

/// Decay points as fractions of the total number of epochs.
pub const DECAY_FRACTIONS: [f64; 3] = [0.3, 0.6, 0.8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    NoisyVal,
    CleanVal,
    None,
}

impl EarlyStop {
    pub fn as_str(self) -> &'static str {
        match self {
            EarlyStop::NoisyVal => "noisy_val",
            EarlyStop::CleanVal => "clean_val",
            EarlyStop::None => "none",
        }
    }
}

impl FromStr for EarlyStop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy_val" => Ok(EarlyStop::NoisyVal),
            "clean_val" => Ok(EarlyStop::CleanVal),
            "none" => Ok(EarlyStop::None),
            other => Err(Error::invalid(
                "early_stop",
                format!("unknown mode {other:?} (expected noisy_val, clean_val or none)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub nesterov: bool,
    pub l2: f64,
    pub lambda: f64,
    pub seed: u64,
    pub early_stop: EarlyStop,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 128,
            lr: 0.1,
            decay_factor: 0.2,
            decay_epochs: decay_points(90),
            momentum: 0.9,
            nesterov: true,
            l2: 5e-4,
            lambda: 1.0,
            seed: 0,
            early_stop: EarlyStop::NoisyVal,
            val_fraction: 0.02,
        }
    }
}

/// `round(f · epochs)` for each decay fraction, deduplicated and kept below `epochs`.
pub fn decay_points(epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = DECAY_FRACTIONS
        .iter()
        .map(|f| (f * epochs as f64).round() as usize)
        .filter(|&e| e > 0 && e < epochs)
        .collect();
    out.dedup();
    out
}

impl TrainConfig {
    /// Changes the epoch budget and rescales the decay points with it.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.decay_epochs = decay_points(epochs);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr", "must be a positive number"));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::invalid("decay_factor", "must be > 0"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("decay_epochs", "must be strictly increasing"));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::invalid("decay_epochs", "must be < epochs"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must be in [0, 1)"));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::invalid("l2", "must be >= 0"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda", "must be >= 0"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("val_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn sgd(&self, lr: f64) -> SgdSettings {
        SgdSettings {
            lr,
            momentum: self.momentum,
            nesterov: self.nesterov,
            l2: self.l2,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr · factor^(number of decay points ≤ epoch)`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let passed = config.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    config.lr * config.decay_factor.powi(passed as i32)
}

/// Deterministic disjoint split; `round(N · fraction)` rows go to validation.
pub fn split_train_val(
    dataset: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("val_fraction", "must be in (0, 1)"));
    }
    let n = dataset.len();
    let n_val = (n as f64 * fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::invalid(
            "val_fraction",
            format!("split of {n} examples at {fraction} leaves an empty side"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split", 0));
    let (val, train) = idx.split_at(n_val);
    let mut val = val.to_vec();
    let mut train = train.to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((
        dataset.subset(&train, Split::Train),
        dataset.subset(&val, Split::Val),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation accuracy against the noisy labels.
    pub val_acc: f64,
    /// Validation accuracy against the clean labels.
    pub clean_val_acc: f64,
    pub test_acc: f64,
    pub trace: TraceRow,
}

/// Selected epoch; the earliest epoch wins ties.
pub fn early_stop_select(history: &[EpochRecord], mode: EarlyStop) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::invalid("history", "no epochs recorded"));
    }
    let key = |r: &EpochRecord| match mode {
        EarlyStop::NoisyVal => r.val_acc,
        EarlyStop::CleanVal => r.clean_val_acc,
        EarlyStop::None => 0.0,
    };
    if mode == EarlyStop::None {
        return Ok(history.len() - 1);
    }
    let mut best = 0;
    for (i, r) in history.iter().enumerate().skip(1) {
        if key(r) > key(&history[best]) {
            best = i;
        }
    }
    Ok(best)
}

/// Lattice point of a grid search with its validation score.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint<C, R> {
    pub config: C,
    pub score: f64,
    pub result: R,
}

/// Evaluates every lattice point in parallel and picks the highest score;
/// exact ties go to the earliest point.
pub fn grid_search<C, R, F>(grid: &[C], runner: F) -> Result<(usize, Vec<GridPoint<C, R>>)>
where
    C: Clone + Send + Sync,
    R: Send,
    F: Fn(&C) -> Result<(f64, R)> + Sync,
{
    if grid.is_empty() {
        return Err(Error::invalid("grid", "empty lattice"));
    }
    let points = grid
        .par_iter()
        .map(|c| {
            runner(c).map(|(score, result)| GridPoint {
                config: c.clone(),
                score,
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        if p.score > points[best].score {
            best = i;
        }
    }
    Ok((best, points))
}

/// Per-epoch evaluation supplied by a pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub val_acc: f64,
    pub clean_val_acc: f64,
    pub test_acc: f64,
    pub trace: TraceRow,
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct Fit {
    pub history: Vec<EpochRecord>,
    pub selected: usize,
    /// Parameter values at the selected epoch.
    pub best: Vec<Tensor>,
}

impl Fit {
    pub fn selected_record(&self) -> &EpochRecord {
        &self.history[self.selected]
    }

    /// Restores the selected-epoch parameters into `net`.
    pub fn restore(&self, net: &mut Network) {
        for (id, v) in net.store.ids().collect::<Vec<_>>().into_iter().zip(&self.best) {
            *net.store.value_mut(id) = v.clone();
        }
    }
}

/// Mini-batch SGD over `n` training rows.
///
/// `loss` builds the batch loss for the given row indices; `evaluate` runs
/// after every epoch. Batch order is reshuffled each epoch from a stream
/// derived from `(seed, epoch)`.
pub fn fit<L, E>(
    net: &mut Network,
    config: &TrainConfig,
    n: usize,
    mut loss: L,
    mut evaluate: E,
) -> Result<Fit>
where
    L: FnMut(&Network, &mut Tape, &[usize]) -> Result<NodeRef>,
    E: FnMut(&Network, usize) -> Result<Evaluation>,
{
    config.validate()?;
    if n == 0 {
        return Err(Error::invalid("train", "no training examples"));
    }
    let snapshot = |net: &Network| -> Vec<Tensor> {
        net.store.iter().map(|(_, p)| p.value.clone()).collect()
    };
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = snapshot(net);
    let mut best_score = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, "shuffle", epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let l = loss(net, &mut tape, batch)?;
            total += tape.value(l).item() * batch.len() as f64;
            let grads = tape.backward(l)?;
            tape.accumulate_into(&grads, &mut net.store)?;
            sgd_step(&mut net.store, config.sgd(lr))?;
        }
        let eval = evaluate(net, epoch)?;
        let score = match config.early_stop {
            EarlyStop::NoisyVal => eval.val_acc,
            EarlyStop::CleanVal => eval.clean_val_acc,
            EarlyStop::None => f64::INFINITY,
        };
        if score > best_score || config.early_stop == EarlyStop::None {
            best_score = score;
            best = snapshot(net);
        }
        let mut trace = eval.trace;
        trace.epoch = epoch;
        trace.lr = lr;
        trace.test_acc = eval.test_acc;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: total / n as f64,
            val_acc: eval.val_acc,
            clean_val_acc: eval.clean_val_acc,
            test_acc: eval.test_acc,
            trace,
        });
    }
    let selected = early_stop_select(&history, config.early_stop)?;
    Ok(Fit {
        history,
        selected,
        best,
    })
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

const HISTORY_HEADER: &str = "epoch,lr,train_loss,val_acc,clean_val_acc,test_acc";

/// One CSV row per epoch.
pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.val_acc, r.clean_val_acc, r.test_acc
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
