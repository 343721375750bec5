//! Loss-driven mixture of experts.
//!
//! Each user's gate is a softmax over the inverse validation losses of the
//! experts, recomputed once per epoch and held constant during
//! backpropagation. The ensemble mixes expert probability vectors,
//! `Ô_u = Σ_k G_k(u) p_k(u)`, and training minimizes the per-user weighted
//! multinomial cross-entropy of `Ô_u` plus gate-weighted expert KL terms.
//!
//! Each expert's KL term enters at full weight `β KL_k` by default;
//! [`KlWeighting::Gate`] scales it by the expert's gate value instead.
//!
//! `log Ô` is evaluated as `logsumexp_k(log G_k + log p_k)`, which is exact
//! for a single expert with unit gate, so the one-expert ensemble reproduces
//! the standalone MultVAE trainer bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{MainstreamProfile, SplitDataset};
use crate::error::{Error, Result};
use crate::expert::{
    at, per_item_ce, ExpertDims, ExpertParams, ExpertRngs, ForwardCache, ForwardNoise, EVAL_BLOCK,
};
use crate::metrics::{ndcg_at_k, rank_items, BiasReport, ScoreSource};
use crate::rng;
use crate::scalar::Scalar;
use crate::sync::{SyncConfig, SyncState};
use crate::tensor::{log_sum_exp, DenseMatrix};
use crate::training::{
    ce_logit_grad_row, epoch_batches, normalized_inputs, subgroup_means, EpochRecord, TrainConfig,
};

/// Default floor on a loss before it is inverted inside the gate.
pub const DEFAULT_GATE_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T> {
    pub values: Vec<T>,
    /// No expert had a defined loss; the gate is uniform.
    pub fallback: bool,
}

/// `G_k = exp(1/max(L_k, eps)) / Σ_t exp(1/max(L_t, eps))`, evaluated after
/// subtracting the largest exponent.
///
/// Experts with an undefined loss get zero gate; if every loss is undefined
/// the gate is uniform and flagged.
pub fn gate_from_losses<T: Scalar>(losses: &[Option<T>], eps: T) -> Gate<T> {
    let n = losses.len();
    let exponents: Vec<Option<T>> = losses
        .iter()
        .map(|l| l.map(|l| T::one() / l.max(eps)))
        .collect();
    let Some(max) = exponents.iter().flatten().copied().reduce(T::max) else {
        return Gate {
            values: vec![T::one() / T::from_count(n); n],
            fallback: true,
        };
    };
    let raw: Vec<T> = exponents
        .iter()
        .map(|e| e.map_or(T::zero(), |e| (e - max).exp()))
        .collect();
    let total: T = raw.iter().copied().sum();
    Gate {
        values: raw.into_iter().map(|v| v / total).collect(),
        fallback: false,
    }
}

/// Per-user gate rows and the validation losses they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTable<T> {
    values: DenseMatrix<T>,
    source_losses: DenseMatrix<T>,
    fallback: Vec<bool>,
    epoch_computed: usize,
}

impl<T: Scalar> GateTable<T> {
    pub fn uniform(n_users: usize, n_experts: usize) -> Self {
        Self {
            values: DenseMatrix::from_fn(n_users, n_experts, |_, _| {
                T::one() / T::from_count(n_experts)
            }),
            source_losses: DenseMatrix::zeros(n_users, n_experts),
            fallback: vec![true; n_users],
            epoch_computed: 0,
        }
    }

    pub fn from_parts(
        values: DenseMatrix<T>,
        source_losses: DenseMatrix<T>,
        fallback: Vec<bool>,
        epoch_computed: usize,
    ) -> Result<Self> {
        if values.shape() != source_losses.shape() || fallback.len() != values.rows() {
            return Err(Error::Dimension(
                "gate table parts disagree in shape".into(),
            ));
        }
        Ok(Self {
            values,
            source_losses,
            fallback,
            epoch_computed,
        })
    }

    /// Builds a table from per-user, per-expert validation losses; `None`
    /// rows fall back to uniform gates.
    pub fn from_losses(losses: &[Option<Vec<T>>], n_experts: usize, eps: T, epoch: usize) -> Self {
        let n = losses.len();
        let mut values = DenseMatrix::zeros(n, n_experts);
        let mut source = DenseMatrix::zeros(n, n_experts);
        let mut fallback = vec![false; n];
        for (u, row) in losses.iter().enumerate() {
            let opts: Vec<Option<T>> = match row {
                Some(r) => r.iter().copied().map(Some).collect(),
                None => vec![None; n_experts],
            };
            let gate = gate_from_losses(&opts, eps);
            values.row_mut(u).copy_from_slice(&gate.values);
            if let Some(r) = row {
                source.row_mut(u).copy_from_slice(r);
            }
            fallback[u] = gate.fallback;
        }
        Self {
            values,
            source_losses: source,
            fallback,
            epoch_computed: epoch,
        }
    }

    pub fn n_users(&self) -> usize {
        self.values.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, u: usize) -> &[T] {
        self.values.row(u)
    }

    pub fn values(&self) -> &DenseMatrix<T> {
        &self.values
    }

    pub fn source_losses(&self) -> &DenseMatrix<T> {
        &self.source_losses
    }

    pub fn fallback(&self) -> &[bool] {
        &self.fallback
    }

    pub fn epoch_computed(&self) -> usize {
        self.epoch_computed
    }
}

/// How expert KL terms enter the ensemble objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeighting {
    /// `β Σ_k KL_k`.
    #[default]
    Full,
    /// `β Σ_k G_k KL_k`.
    Gate,
}

impl KlWeighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Gate => "gate",
        }
    }
}

impl std::str::FromStr for KlWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "gate" => Ok(Self::Gate),
            other => Err(Error::Config(format!(
                "unknown KL weighting {other:?} (full | gate)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_experts: usize,
    pub gate_eps: f64,
    pub kl_weighting: KlWeighting,
    pub train: TrainConfig,
    /// `None` trains with unit weights throughout.
    pub sync: Option<SyncConfig>,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be at least 1".into()));
        }
        if !(self.gate_eps > 0.0) {
            return Err(Error::Config(format!(
                "gate eps must be positive, got {}",
                self.gate_eps
            )));
        }
        self.train.validate()?;
        if let Some(s) = &self.sync {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel<T> {
    pub experts: Vec<ExpertParams<T>>,
    pub gate: GateTable<T>,
    pub config: EnsembleConfig,
}

/// Per-user results of one evaluation pass over the validation fold.
pub struct ValidationPass<T> {
    /// Mixture cross-entropy on validation items divided by their count.
    pub ensemble_losses: Vec<Option<T>>,
    pub ndcg: Vec<Option<f64>>,
}

impl<T: Scalar> EnsembleModel<T> {
    /// Experts initialized from distinct sub-streams of the run seed; gates
    /// start uniform.
    pub fn new(dims: ExpertDims, n_users: usize, config: EnsembleConfig) -> Result<Self> {
        config.validate()?;
        let experts = (0..config.n_experts)
            .map(|k| ExpertParams::init_seeded(dims, config.train.seed, k))
            .collect();
        Ok(Self {
            experts,
            gate: GateTable::uniform(n_users, config.n_experts),
            config,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dims(&self) -> ExpertDims {
        self.experts[0].dims()
    }

    fn check_gate(&self) -> Result<()> {
        if self.gate.n_experts() != self.experts.len() {
            return Err(Error::Config(format!(
                "gate table has {} columns for {} experts",
                self.gate.n_experts(),
                self.experts.len()
            )));
        }
        Ok(())
    }

    /// `Ô_u = Σ_k G_k(u) p_k(x)` in eval composition.
    pub fn ensemble_predict(&self, u: usize, x: &[T]) -> Result<Vec<T>> {
        self.check_gate()?;
        let xm = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
        let gates = self.gate.row(u);
        let mut out = vec![T::zero(); x.len()];
        for (expert, &g) in self.experts.iter().zip(gates) {
            let cache = expert.forward_eval(&xm)?;
            for (o, &lp) in out.iter_mut().zip(cache.log_probs.row(0)) {
                *o += g * lp.exp();
            }
        }
        Ok(out)
    }

    /// `−Σ_{i ∈ targets} log Ô_{u,i}` plus the experts' KL terms, in eval
    /// composition.
    pub fn ensemble_loss(&self, u: usize, x: &[T], targets: &[usize], beta: T) -> Result<T> {
        self.check_gate()?;
        let xm = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
        let caches = self
            .experts
            .iter()
            .map(|e| e.forward_eval(&xm))
            .collect::<Result<Vec<_>>>()?;
        let gates = DenseMatrix::from_vec(1, self.n_experts(), self.gate.row(u).to_vec())?;
        let (losses, _) = mixture_objective(
            &self.experts,
            &caches,
            &gates,
            &[targets],
            beta,
            self.config.kl_weighting,
            &[T::one()],
            false,
        )?;
        Ok(losses[0])
    }

    /// `log Ô` rows for the given users, eval composition.
    pub fn log_mixture(&self, split: &SplitDataset, users: &[usize]) -> Result<DenseMatrix<T>> {
        self.check_gate()?;
        let x = normalized_inputs(split, users);
        let caches = self
            .experts
            .iter()
            .map(|e| e.forward_eval(&x))
            .collect::<Result<Vec<_>>>()?;
        let gates: Vec<&[T]> = users.iter().map(|&u| self.gate.row(u)).collect();
        Ok(mix_log_probs(&caches, &gates))
    }

    /// Recomputes every user's gate from per-expert validation
    /// cross-entropies, then scores the validation fold with the new gates.
    pub fn refresh(
        &mut self,
        split: &SplitDataset,
        epoch: usize,
        k: usize,
    ) -> Result<ValidationPass<T>> {
        let n = split.n_users();
        let n_e = self.n_experts();
        let eps = T::lit(self.config.gate_eps);
        let users: Vec<usize> = (0..n).collect();
        let mut per_expert: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        let mut pass = ValidationPass {
            ensemble_losses: Vec::with_capacity(n),
            ndcg: Vec::with_capacity(n),
        };
        let mut all_gates: Vec<Vec<T>> = Vec::with_capacity(n);
        for block in users.chunks(EVAL_BLOCK) {
            let x = normalized_inputs(split, block);
            let caches = self
                .experts
                .iter()
                .map(|e| e.forward_eval(&x))
                .collect::<Result<Vec<_>>>()?;
            let mut block_gates = Vec::with_capacity(block.len());
            for (row, &u) in block.iter().enumerate() {
                let val = split.val_items(u);
                let losses: Option<Vec<T>> = (!val.is_empty()).then(|| {
                    caches
                        .iter()
                        .map(|c| per_item_ce(c.log_probs.row(row), val).expect("non-empty"))
                        .collect()
                });
                let opts: Vec<Option<T>> = match &losses {
                    Some(l) => l.iter().copied().map(Some).collect(),
                    None => vec![None; n_e],
                };
                block_gates.push(gate_from_losses(&opts, eps).values);
                per_expert.push(losses);
            }
            let gate_refs: Vec<&[T]> = block_gates.iter().map(Vec::as_slice).collect();
            let mixed = mix_log_probs(&caches, &gate_refs);
            let scored: Result<Vec<(Option<T>, Option<f64>)>> = block
                .par_iter()
                .enumerate()
                .map(|(row, &u)| {
                    let val = split.val_items(u);
                    let loss = per_item_ce(mixed.row(row), val);
                    if val.is_empty() {
                        return Ok((loss, None));
                    }
                    let list = rank_items(mixed.row(row), split.train_items(u), k)?;
                    Ok((loss, ndcg_at_k(&list, val, k)))
                })
                .collect();
            for (loss, ndcg) in scored? {
                pass.ensemble_losses.push(loss);
                pass.ndcg.push(ndcg);
            }
            all_gates.extend(block_gates);
        }
        self.gate = GateTable::from_losses(&per_expert, n_e, eps, epoch);
        debug_assert!(all_gates
            .iter()
            .enumerate()
            .all(|(u, g)| g.as_slice() == self.gate.row(u)));
        Ok(pass)
    }
}

/// Recomputes the gate table of `model` on `split` without altering the
/// experts.
pub fn refresh_gates<T: Scalar>(
    model: &EnsembleModel<T>,
    split: &SplitDataset,
) -> Result<GateTable<T>> {
    let mut clone = model.clone();
    let epoch = model.gate.epoch_computed();
    clone.refresh(split, epoch, model.config.train.k)?;
    Ok(clone.gate)
}

/// `out[b, i] = logsumexp_k(log g_{b,k} + log p_{k,b,i})`.
fn mix_log_probs<T: Scalar>(caches: &[ForwardCache<T>], gates: &[&[T]]) -> DenseMatrix<T> {
    let (b, m) = caches[0].log_probs.shape();
    let mut out = DenseMatrix::zeros(b, m);
    let mut terms = vec![T::zero(); caches.len()];
    for row in 0..b {
        let log_g: Vec<T> = gates[row].iter().map(|g| g.ln()).collect();
        let dst = out.row_mut(row);
        for (i, d) in dst.iter_mut().enumerate() {
            for (k, c) in caches.iter().enumerate() {
                terms[k] = log_g[k] + c.log_probs.get(row, i);
            }
            *d = log_sum_exp(&terms);
        }
    }
    out
}

/// Per-row losses and per-expert gradients of
/// `Σ_b w_b [−Σ_{i ∈ t_b} log Ô_{b,i} + β Σ_k c_{b,k} KL_{k,b}]`
/// with gates held constant, where `c` is 1 or the gate value. Gradients
/// are skipped when `want_grads` is false.
#[allow(clippy::too_many_arguments)]
pub fn mixture_objective<T: Scalar>(
    experts: &[ExpertParams<T>],
    caches: &[ForwardCache<T>],
    gates: &DenseMatrix<T>,
    targets: &[&[usize]],
    beta: T,
    kl_weighting: KlWeighting,
    row_weights: &[T],
    want_grads: bool,
) -> Result<(Vec<T>, Vec<ExpertParams<T>>)> {
    let n_e = experts.len();
    if caches.len() != n_e || gates.cols() != n_e {
        return Err(Error::Config(format!(
            "{} experts, {} forward passes, {} gate columns",
            n_e,
            caches.len(),
            gates.cols()
        )));
    }
    let b = caches[0].batch();
    if targets.len() != b || row_weights.len() != b || gates.rows() != b {
        return Err(Error::Dimension("mixture batch shapes disagree".into()));
    }
    let m = caches[0].logits.cols();
    let mut dlogits: Vec<DenseMatrix<T>> = (0..n_e).map(|_| DenseMatrix::zeros(b, m)).collect();
    let mut kl_coef: Vec<Vec<T>> = vec![Vec::with_capacity(b); n_e];
    let mut losses = Vec::with_capacity(b);
    let mut resp: Vec<Vec<T>> = vec![Vec::new(); n_e];
    let mut terms = vec![T::zero(); n_e];
    for row in 0..b {
        let g = gates.row(row);
        let log_g: Vec<T> = g.iter().map(|v| v.ln()).collect();
        let t = targets[row];
        resp.iter_mut().for_each(|r| r.clear());
        let mut ce = T::zero();
        for &i in t {
            for k in 0..n_e {
                terms[k] = log_g[k] + caches[k].log_probs.get(row, i);
            }
            let lse = log_sum_exp(&terms);
            ce -= lse;
            for k in 0..n_e {
                resp[k].push((terms[k] - lse).exp());
            }
        }
        let kl_scale = |k: usize| match kl_weighting {
            KlWeighting::Full => T::one(),
            KlWeighting::Gate => g[k],
        };
        let mut kl = T::zero();
        for k in 0..n_e {
            kl += kl_scale(k) * caches[k].kl(row);
        }
        losses.push(ce + beta * kl);
        if want_grads {
            for k in 0..n_e {
                ce_logit_grad_row(
                    caches[k].log_probs.row(row),
                    t,
                    &resp[k],
                    row_weights[row],
                    dlogits[k].row_mut(row),
                );
                kl_coef[k].push(row_weights[row] * beta * kl_scale(k));
            }
        }
    }
    let grads = if want_grads {
        experts
            .iter()
            .zip(caches)
            .zip(dlogits.iter().zip(&kl_coef))
            .map(|((e, c), (dl, kc))| e.backward(c, dl, kc))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok((losses, grads))
}

/// Eval-mode `log Ô` scores for ranking.
pub struct EnsembleScorer<'a, T> {
    pub model: &'a EnsembleModel<T>,
    pub split: &'a SplitDataset,
}

impl<T: Scalar> ScoreSource<T> for EnsembleScorer<'_, T> {
    fn n_items(&self) -> usize {
        self.model.dims().items
    }

    fn score_users(&self, users: &[usize]) -> Result<DenseMatrix<T>> {
        self.model.log_mixture(self.split, users)
    }
}

pub struct TrainOutcome<T> {
    /// Experts and gates from the epoch with the best overall validation
    /// NDCG@K.
    pub best: EnsembleModel<T>,
    pub best_epoch: usize,
    pub last: EnsembleModel<T>,
    pub history: Vec<EpochRecord>,
}

/// End-to-end training.
///
/// Per epoch: push the ensemble validation losses to the weight module,
/// take this epoch's weights (unit during the gap or when weighting is off),
/// make one pass of shuffled minibatches minimizing `Σ_b w_b L_b / |batch|`
/// with Adam on every expert, then recompute gates and validation NDCG.
pub fn train<T: Scalar>(
    mut model: EnsembleModel<T>,
    split: &SplitDataset,
    profile: &MainstreamProfile,
) -> Result<TrainOutcome<T>> {
    let cfg = model.config.clone();
    cfg.validate()?;
    model.check_gate()?;
    let dims = model.dims();
    if dims.items != split.n_items() || model.gate.n_users() != split.n_users() {
        return Err(Error::Dimension(format!(
            "model covers {} users x {} items, dataset has {} x {}",
            model.gate.n_users(),
            dims.items,
            split.n_users(),
            split.n_items()
        )));
    }
    if profile.n_users() != split.n_users() {
        return Err(Error::Incompatible(
            "mainstream profile and split differ in users".into(),
        ));
    }
    let tc = &cfg.train;
    let n = split.n_users();
    let mut sync = cfg.sync.map(|c| SyncState::<T>::new(c, n)).transpose()?;
    let mut opts: Vec<_> = model
        .experts
        .iter()
        .map(|e| e.new_optimizer(tc.adam))
        .collect();
    let mut rngs: Vec<ExpertRngs> = (0..model.n_experts())
        .map(|k| ExpertRngs::new(tc.seed, k))
        .collect();
    let mut shuffle = rng::shuffle_stream(tc.seed);
    let trainable = split.trainable_users();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, EnsembleModel<T>)> = None;

    let mut pass = model.refresh(split, 0, tc.k)?;
    for epoch in 1..=tc.epochs {
        let (weights, clipped) = match sync.as_mut() {
            Some(s) => {
                s.push_loss(epoch, &pass.ensemble_losses)?;
                let mode = s.config().mode;
                let w = s.weights_for_epoch(epoch, mode)?.to_vec();
                (w, s.last_clipped())
            }
            None => (vec![T::one(); n], 0),
        };
        let beta_f = tc.beta_at(epoch);
        let beta = T::lit(beta_f);
        let mut loss_sum = 0.0;
        for (bi, batch) in epoch_batches(&trainable, tc.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let x = normalized_inputs::<T>(split, &batch);
            let caches = model
                .experts
                .iter()
                .zip(rngs.iter_mut())
                .map(|(e, r)| {
                    let noise = ForwardNoise::sample(dims, batch.len(), tc.dropout, r);
                    e.forward_with_noise(&x, &noise)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| at(epoch, bi, e))?;
            let gates = model.gate.values().select_rows(&batch);
            let targets: Vec<&[usize]> = batch.iter().map(|&u| split.train_items(u)).collect();
            let size = T::from_count(batch.len());
            let row_w: Vec<T> = batch.iter().map(|&u| weights[u] / size).collect();
            let (losses, grads) = mixture_objective(
                &model.experts,
                &caches,
                &gates,
                &targets,
                beta,
                cfg.kl_weighting,
                &row_w,
                true,
            )?;
            for l in &losses {
                loss_sum += l.as_f64();
            }
            for ((e, g), o) in model.experts.iter_mut().zip(&grads).zip(opts.iter_mut()) {
                e.apply(g, o).map_err(|err| at(epoch, bi, err))?;
            }
        }
        let train_loss = loss_sum / trainable.len().max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "epoch {epoch}: mean train loss {train_loss}"
            )));
        }
        pass = model.refresh(split, epoch, tc.k)?;
        let report = BiasReport::aggregate("val", tc.k, &pass.ndcg, profile)?;
        let score = report.overall.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            beta: beta_f,
            val_ndcg: report.overall,
            val_groups: report.groups,
            mean_weights: subgroup_means(&weights, profile),
            weight_range: weights.iter().map(|w| w.as_f64()).fold(None, |acc, w| {
                Some(acc.map_or((w, w), |(lo, hi): (f64, f64)| (lo.min(w), hi.max(w))))
            }),
            clipped,
        });
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}
