//! Adaptive per-user loss weights.
//!
//! Weights solve `max_w Σ w_u s_u − α‖w‖²` subject to `Σ w_u = N, w ≥ 0`,
//! where the signal `s_u` is either the latest validation loss or the mean of
//! the recent per-epoch loss decreases. The one-shot KKT closed form is used
//! as-is; when the `max(·, 0)` clip activates, `Σ w = N` no longer holds and
//! the number of clipped users is reported.

use std::collections::VecDeque;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSolution<T> {
    pub weights: Vec<T>,
    pub lambda: T,
    pub clipped: usize,
}

/// `λ = (Σ_v s_v − 2αN)/N`, `w_u = max((s_u − λ)/(2α), 0)`.
pub fn solve_weights<T: Scalar>(signal: &[T], alpha: T) -> Result<WeightSolution<T>> {
    if !(alpha > T::zero()) || !alpha.is_finite() {
        return Err(Error::Config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if signal.is_empty() {
        return Err(Error::Config("weight solve over zero users".into()));
    }
    if let Some(u) = signal.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("weight signal of user {u}")));
    }
    let n = T::from_count(signal.len());
    let two_alpha = T::lit(2.0) * alpha;
    let total: T = signal.iter().copied().sum();
    let lambda = (total - two_alpha * n) / n;
    let mut clipped = 0;
    let weights = signal
        .iter()
        .map(|&s| {
            let w = (s - lambda) / two_alpha;
            if w < T::zero() {
                clipped += 1;
                T::zero()
            } else {
                w
            }
        })
        .collect();
    Ok(WeightSolution {
        weights,
        lambda,
        clipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Latest validation loss as the signal.
    RawLoss,
    /// Mean of the last `window` loss decreases as the signal.
    LossChange,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::RawLoss => "raw_loss",
            WeightMode::LossChange => "loss_change",
        }
    }
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_loss" => Ok(WeightMode::RawLoss),
            "loss_change" => Ok(WeightMode::LossChange),
            other => Err(Error::Config(format!("unknown weight mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    pub alpha: f64,
    /// Epochs `1..=gap` train with unit weights.
    pub gap: usize,
    pub window: usize,
    pub mode: WeightMode,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gap: 40,
            window: 5,
            mode: WeightMode::LossChange,
        }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "sync alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("sync window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-user validation-loss history and the current weights.
#[derive(Clone, Debug)]
pub struct SyncState<T> {
    config: SyncConfig,
    /// Last `window + 1` losses per user; `None` marks a user without
    /// validation items.
    history: Vec<VecDeque<Option<T>>>,
    last_epoch: Option<usize>,
    weights: Vec<T>,
    last_clipped: usize,
}

impl<T: Scalar> SyncState<T> {
    pub fn new(config: SyncConfig, n_users: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            history: vec![VecDeque::with_capacity(config.window + 1); n_users],
            last_epoch: None,
            weights: vec![T::one(); n_users],
            last_clipped: 0,
        })
    }

    pub fn config(&self) -> &SyncConfig {
        &self.config
    }

    pub fn n_users(&self) -> usize {
        self.history.len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn last_clipped(&self) -> usize {
        self.last_clipped
    }

    pub fn history(&self, u: usize) -> impl Iterator<Item = Option<T>> + '_ {
        self.history[u].iter().copied()
    }

    /// Appends one epoch of ensemble validation losses.
    pub fn push_loss(&mut self, epoch: usize, losses: &[Option<T>]) -> Result<()> {
        if losses.len() != self.history.len() {
            return Err(Error::Dimension(format!(
                "{} losses pushed for {} users",
                losses.len(),
                self.history.len()
            )));
        }
        if let Some(last) = self.last_epoch {
            if epoch <= last {
                return Err(Error::Sequencing(format!(
                    "loss for epoch {epoch} pushed after epoch {last}"
                )));
            }
        }
        if let Some(u) = losses
            .iter()
            .position(|l| l.is_some_and(|v| !v.is_finite()))
        {
            return Err(Error::Numeric(format!(
                "validation loss of user {u} at epoch {epoch}"
            )));
        }
        let cap = self.config.window + 1;
        for (buf, &loss) in self.history.iter_mut().zip(losses) {
            if buf.len() == cap {
                buf.pop_front();
            }
            buf.push_back(loss);
        }
        self.last_epoch = Some(epoch);
        Ok(())
    }

    /// Mean of the most recent `min(window, available)` loss decreases
    /// `L^{t-1} − L^t`. `None` until two losses are buffered.
    pub fn smoothed_change(&self, u: usize) -> Option<T> {
        let buf = &self.history[u];
        if buf.len() < 2 {
            return None;
        }
        let losses: Vec<T> = buf.iter().copied().collect::<Option<_>>()?;
        let take = self.config.window.min(losses.len() - 1);
        let start = losses.len() - 1 - take;
        let mut sum = T::zero();
        for w in losses[start..].windows(2) {
            sum += w[0] - w[1];
        }
        Some(sum / T::from_count(take))
    }

    pub fn latest_loss(&self, u: usize) -> Option<T> {
        self.history[u].back().copied().flatten()
    }

    /// Weights for training epoch `epoch` (1-based). All ones during the gap;
    /// afterwards users with a ready signal are solved jointly and the rest
    /// keep weight 1.
    pub fn weights_for_epoch(&mut self, epoch: usize, mode: WeightMode) -> Result<&[T]> {
        self.last_clipped = 0;
        self.weights.iter_mut().for_each(|w| *w = T::one());
        if epoch <= self.config.gap {
            return Ok(&self.weights);
        }
        let signals: Vec<(usize, T)> = (0..self.n_users())
            .filter_map(|u| {
                let s = match mode {
                    WeightMode::RawLoss => self.latest_loss(u),
                    WeightMode::LossChange => self.smoothed_change(u),
                };
                s.map(|s| (u, s))
            })
            .collect();
        if signals.is_empty() {
            return Ok(&self.weights);
        }
        let values: Vec<T> = signals.iter().map(|&(_, s)| s).collect();
        let solution = solve_weights(&values, T::lit(self.config.alpha))?;
        for (&(u, _), &w) in signals.iter().zip(&solution.weights) {
            self.weights[u] = w;
        }
        self.last_clipped = solution.clipped;
        Ok(&self.weights)
    }
}
