//! Pieces shared by the standalone expert trainer and the mixture trainer:
//! hyperparameters, the β schedule, minibatching, input construction, and the
//! multinomial cross-entropy logit gradient.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MainstreamProfile, SplitDataset, Subgroup};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AdamConfig, DenseMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// KL weight reached at the end of annealing.
    pub beta_max: f64,
    /// Fraction of `epochs` over which β rises linearly from 0.
    pub anneal_frac: f64,
    pub dropout: f64,
    /// Ranking cutoff for validation NDCG.
    pub k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            beta_max: 0.2,
            anneal_frac: 0.2,
            dropout: 0.5,
            k: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.k == 0 {
            return Err(Error::Config(
                "epochs, batch_size and k must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.beta_max >= 0.0) || !(0.0..=1.0).contains(&self.anneal_frac) {
            return Err(Error::Config(
                "beta_max must be >= 0, anneal_frac in [0, 1]".into(),
            ));
        }
        let a = &self.adam;
        if !(a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }

    /// KL weight for 1-based `epoch`: 0 at the first epoch, rising linearly to
    /// `beta_max` over the annealing span, then held.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        let span = ((self.anneal_frac * self.epochs as f64).round() as usize).max(1);
        let progress = (epoch.saturating_sub(1) as f64 / span as f64).min(1.0);
        self.beta_max * progress
    }
}

/// Shuffles the trainable users and chunks them into minibatches.
pub fn epoch_batches(users: &[usize], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order = users.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// L2-normalized binary training vectors for `users`; empty users give a zero
/// row.
pub fn normalized_inputs<T: Scalar>(split: &SplitDataset, users: &[usize]) -> DenseMatrix<T> {
    let mut x = DenseMatrix::zeros(users.len(), split.n_items());
    for (row, &u) in users.iter().enumerate() {
        let items = split.train_items(u);
        if items.is_empty() {
            continue;
        }
        let v = T::one() / T::from_count(items.len()).sqrt();
        let out = x.row_mut(row);
        for &i in items {
            out[i] = v;
        }
    }
    x
}

/// Gradient of `−Σ_t a_t log p_t` with respect to the logits, scaled by
/// `coef`: `coef · (p · Σa − a)`.
///
/// `a` holds one coefficient per target item: all ones for a single expert,
/// posterior responsibilities for a mixture.
pub fn ce_logit_grad_row<T: Scalar>(
    log_probs: &[T],
    targets: &[usize],
    a: &[T],
    coef: T,
    out: &mut [T],
) {
    debug_assert_eq!(targets.len(), a.len());
    let mut sum_a = T::zero();
    for &v in a {
        sum_a += v;
    }
    let scale = coef * sum_a;
    for (o, &lp) in out.iter_mut().zip(log_probs) {
        *o = scale * lp.exp();
    }
    for (&t, &v) in targets.iter().zip(a) {
        out[t] -= coef * v;
    }
}

/// One epoch of training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean unweighted training objective over the users trained this epoch.
    pub train_loss: f64,
    pub beta: f64,
    pub val_ndcg: Option<f64>,
    pub val_groups: [Option<f64>; 5],
    /// Mean loss weight per subgroup during this epoch.
    pub mean_weights: [Option<f64>; 5],
    /// Smallest and largest per-user weight during this epoch.
    pub weight_range: Option<(f64, f64)>,
    pub clipped: usize,
}

pub fn subgroup_means<T: Scalar>(values: &[T], profile: &MainstreamProfile) -> [Option<f64>; 5] {
    std::array::from_fn(|g| {
        let members = profile.members(Subgroup::ALL[g]);
        (!members.is_empty()).then(|| {
            members.iter().map(|&u| values[u].as_f64()).sum::<f64>() / members.len() as f64
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Fold;

    #[test]
    fn beta_schedule_anneals_then_holds() {
        let cfg = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.beta_at(1), 0.0);
        assert!((cfg.beta_at(11) - 0.1).abs() < 1e-12);
        assert!((cfg.beta_at(21) - 0.2).abs() < 1e-12);
        assert!((cfg.beta_at(100) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let s = SplitDataset::from_assignments(
            3,
            5,
            0,
            [
                (0, 1, Fold::Train),
                (0, 4, Fold::Train),
                (1, 2, Fold::Test),
                (2, 0, Fold::Train),
            ],
        )
        .unwrap();
        let x: DenseMatrix<f64> = normalized_inputs(&s, &[0, 1, 2]);
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
        assert!((norm(x.row(0)) - 1.0).abs() < 1e-15);
        assert_eq!(norm(x.row(1)), 0.0);
        assert_eq!(x.row(2), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batches_cover_every_user_once() {
        use rand::SeedableRng;
        let users: Vec<usize> = (0..23).collect();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let b = epoch_batches(&users, 5, &mut r);
        assert_eq!(b.len(), 5);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, users);
    }

    #[test]
    fn logit_grad_of_uniform_distribution() {
        let lp = [0.25f64.ln(); 4];
        let mut out = [0.0; 4];
        ce_logit_grad_row(&lp, &[1, 3], &[1.0, 1.0], 1.0, &mut out);
        assert_eq!(out, [0.5, -0.5, 0.5, -0.5]);
    }
}
