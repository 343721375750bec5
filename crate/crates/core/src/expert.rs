//! The MultVAE expert: tanh encoder to a Gaussian latent, reparameterized
//! sample, tanh decoder to item logits, and a multinomial likelihood with a
//! β-weighted KL term.
//!
//! ```text
//! x ─dropout─▶ tanh(x W1 + b1) = h ─┬─▶ h Wmu + bmu = mu
//!                                   └─▶ h Wlv + blv = logvar
//! z = mu + exp(logvar / 2) ⊙ ε
//! tanh(z Wd1 + bd1) = g ─▶ g Wd2 + bd2 = logits
//! ```

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Fold, MainstreamProfile, SplitDataset};
use crate::error::{Error, Result};
use crate::metrics::{per_user_ndcg, BiasReport, ScoreSource};
use crate::rng::{self, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::{
    affine_backward, affine_forward, log_softmax_inplace, tanh_backward_inplace, tanh_inplace,
    AdamState, DenseMatrix, ParamSlot,
};
use crate::training::{
    ce_logit_grad_row, epoch_batches, normalized_inputs, EpochRecord, TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertDims {
    pub items: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl ExpertDims {
    pub fn new(items: usize, hidden: usize, latent: usize) -> Result<Self> {
        if items == 0 || hidden == 0 || latent == 0 {
            return Err(Error::Config(format!(
                "expert dims must be positive, got {items}x{hidden}x{latent}"
            )));
        }
        Ok(Self {
            items,
            hidden,
            latent,
        })
    }

    /// `(rows, cols)` of each tensor, in [`TENSOR_NAMES`] order. Biases are
    /// single-row.
    pub fn tensor_shapes(&self) -> [(usize, usize); 10] {
        let (m, h, d) = (self.items, self.hidden, self.latent);
        [
            (m, h),
            (1, h),
            (h, d),
            (1, d),
            (h, d),
            (1, d),
            (d, h),
            (1, h),
            (h, m),
            (1, m),
        ]
    }
}

pub const TENSOR_NAMES: [&str; 10] = [
    "enc_w1", "enc_b1", "enc_wmu", "enc_bmu", "enc_wlv", "enc_blv", "dec_w1", "dec_b1", "dec_w2",
    "dec_b2",
];

/// Weights of one expert. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams<T> {
    dims: ExpertDims,
    pub enc_w1: DenseMatrix<T>,
    pub enc_b1: Vec<T>,
    pub enc_wmu: DenseMatrix<T>,
    pub enc_bmu: Vec<T>,
    pub enc_wlv: DenseMatrix<T>,
    pub enc_blv: Vec<T>,
    pub dec_w1: DenseMatrix<T>,
    pub dec_b1: Vec<T>,
    pub dec_w2: DenseMatrix<T>,
    pub dec_b2: Vec<T>,
}

impl<T: Scalar> ExpertParams<T> {
    pub fn zeros(dims: ExpertDims) -> Self {
        let (m, h, d) = (dims.items, dims.hidden, dims.latent);
        Self {
            dims,
            enc_w1: DenseMatrix::zeros(m, h),
            enc_b1: vec![T::zero(); h],
            enc_wmu: DenseMatrix::zeros(h, d),
            enc_bmu: vec![T::zero(); d],
            enc_wlv: DenseMatrix::zeros(h, d),
            enc_blv: vec![T::zero(); d],
            dec_w1: DenseMatrix::zeros(d, h),
            dec_b1: vec![T::zero(); h],
            dec_w2: DenseMatrix::zeros(h, m),
            dec_b2: vec![T::zero(); m],
        }
    }

    /// Xavier-uniform weights, `U(−b, b)` with `b = √(6 / (fan_in + fan_out))`,
    /// and zero biases.
    pub fn init(dims: ExpertDims, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dims);
        for w in [
            &mut p.enc_w1,
            &mut p.enc_wmu,
            &mut p.enc_wlv,
            &mut p.dec_w1,
            &mut p.dec_w2,
        ] {
            let bound = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
        p
    }

    /// Initialization for expert `index` of a run seeded with `seed`.
    pub fn init_seeded(dims: ExpertDims, seed: u64, index: usize) -> Self {
        Self::init(dims, &mut rng::init_stream(seed, index))
    }

    pub fn dims(&self) -> ExpertDims {
        self.dims
    }

    pub fn tensors(&self) -> [&[T]; 10] {
        [
            self.enc_w1.as_slice(),
            &self.enc_b1,
            self.enc_wmu.as_slice(),
            &self.enc_bmu,
            self.enc_wlv.as_slice(),
            &self.enc_blv,
            self.dec_w1.as_slice(),
            &self.dec_b1,
            self.dec_w2.as_slice(),
            &self.dec_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 10] {
        [
            self.enc_w1.as_mut_slice(),
            &mut self.enc_b1,
            self.enc_wmu.as_mut_slice(),
            &mut self.enc_bmu,
            self.enc_wlv.as_mut_slice(),
            &mut self.enc_blv,
            self.dec_w1.as_mut_slice(),
            &mut self.dec_b1,
            self.dec_w2.as_mut_slice(),
            &mut self.dec_b2,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn new_optimizer(&self, config: crate::tensor::AdamConfig) -> AdamState<T> {
        let sizes: Vec<usize> = self.tensors().iter().map(|t| t.len()).collect();
        AdamState::new(config, &sizes)
    }

    /// Applies one Adam step with `grads`.
    pub fn apply(&mut self, grads: &ExpertParams<T>, opt: &mut AdamState<T>) -> Result<()> {
        let mut slots: Vec<ParamSlot<'_, T>> = self
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(TENSOR_NAMES)
            .map(|((value, grad), name)| ParamSlot { name, value, grad })
            .collect();
        opt.step(&mut slots)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Random draws for one training forward pass. `None` fields mean the
/// deterministic eval composition: no dropout, `z = mu`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardNoise<T> {
    /// Inverted-dropout multipliers, `0` or `1/(1−p)`, shape `B × M`.
    pub dropout: Option<DenseMatrix<T>>,
    /// Standard normal draws, shape `B × D`.
    pub eps: Option<DenseMatrix<T>>,
}

impl<T: Scalar> ForwardNoise<T> {
    pub fn none() -> Self {
        Self {
            dropout: None,
            eps: None,
        }
    }

    pub fn sample(dims: ExpertDims, batch: usize, dropout: f64, rngs: &mut ExpertRngs) -> Self {
        let mask = (dropout > 0.0).then(|| {
            let keep = T::lit(1.0 / (1.0 - dropout));
            DenseMatrix::from_fn(batch, dims.items, |_, _| {
                if rngs.dropout.random::<f64>() < dropout {
                    T::zero()
                } else {
                    keep
                }
            })
        });
        let eps = DenseMatrix::from_fn(batch, dims.latent, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rngs.reparam);
            T::lit(e)
        });
        Self {
            dropout: mask,
            eps: Some(eps),
        }
    }
}

/// The dropout and reparameterization streams of one expert.
#[derive(Clone, Debug)]
pub struct ExpertRngs {
    pub dropout: StreamRng,
    pub reparam: StreamRng,
}

impl ExpertRngs {
    pub fn new(seed: u64, expert: usize) -> Self {
        Self {
            dropout: rng::dropout_stream(seed, expert),
            reparam: rng::reparam_stream(seed, expert),
        }
    }
}

/// Activations of a batched forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub input: DenseMatrix<T>,
    pub hidden: DenseMatrix<T>,
    pub mu: DenseMatrix<T>,
    pub logvar: DenseMatrix<T>,
    pub eps: Option<DenseMatrix<T>>,
    pub z: DenseMatrix<T>,
    pub dec_hidden: DenseMatrix<T>,
    pub logits: DenseMatrix<T>,
    pub log_probs: DenseMatrix<T>,
}

/// Single-user view of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertOutput<T> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.logits.rows()
    }

    pub fn output(&self, row: usize) -> ExpertOutput<T> {
        ExpertOutput {
            logits: self.logits.row(row).to_vec(),
            probs: self.log_probs.row(row).iter().map(|v| v.exp()).collect(),
            mu: self.mu.row(row).to_vec(),
            logvar: self.logvar.row(row).to_vec(),
        }
    }

    pub fn kl(&self, row: usize) -> T {
        kl_divergence(self.mu.row(row), self.logvar.row(row))
    }
}

/// `−½ Σ_d (1 + logvar − mu² − exp(logvar))`.
pub fn kl_divergence<T: Scalar>(mu: &[T], logvar: &[T]) -> T {
    let mut acc = T::zero();
    for (&m, &lv) in mu.iter().zip(logvar) {
        acc += T::one() + lv - m * m - lv.exp();
    }
    -T::lit(0.5) * acc
}

/// `−Σ_{i ∈ targets} log p_i`.
pub fn multinomial_ce<T: Scalar>(log_probs: &[T], targets: &[usize]) -> T {
    let mut ce = T::zero();
    for &t in targets {
        ce -= log_probs[t];
    }
    ce
}

/// Multinomial cross-entropy plus `beta · KL` for one user.
pub fn expert_loss<T: Scalar>(out: &ExpertOutput<T>, targets: &[usize], beta: T) -> T {
    let mut lp = out.logits.clone();
    log_softmax_inplace(&mut lp);
    multinomial_ce(&lp, targets) + beta * kl_divergence(&out.mu, &out.logvar)
}

impl<T: Scalar> ExpertParams<T> {
    /// Forward pass over a batch of normalized input rows.
    pub fn forward_with_noise(
        &self,
        x: &DenseMatrix<T>,
        noise: &ForwardNoise<T>,
    ) -> Result<ForwardCache<T>> {
        if x.cols() != self.dims.items {
            return Err(Error::Dimension(format!(
                "input has {} columns, expert expects {} items",
                x.cols(),
                self.dims.items
            )));
        }
        let mut input = x.clone();
        if let Some(mask) = &noise.dropout {
            if mask.shape() != x.shape() {
                return Err(Error::Dimension("dropout mask shape".into()));
            }
            for (v, &m) in input.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *v *= m;
            }
        }
        let mut hidden = affine_forward(&input, &self.enc_w1, &self.enc_b1)?;
        tanh_inplace(&mut hidden);
        let mu = affine_forward(&hidden, &self.enc_wmu, &self.enc_bmu)?;
        let logvar = affine_forward(&hidden, &self.enc_wlv, &self.enc_blv)?;
        let z = match &noise.eps {
            Some(eps) => {
                if eps.shape() != mu.shape() {
                    return Err(Error::Dimension("reparameterization noise shape".into()));
                }
                let half = T::lit(0.5);
                let mut z = mu.clone();
                for ((zv, &lv), &e) in z
                    .as_mut_slice()
                    .iter_mut()
                    .zip(logvar.as_slice())
                    .zip(eps.as_slice())
                {
                    *zv += (lv * half).exp() * e;
                }
                z
            }
            None => mu.clone(),
        };
        let mut dec_hidden = affine_forward(&z, &self.dec_w1, &self.dec_b1)?;
        tanh_inplace(&mut dec_hidden);
        let logits = affine_forward(&dec_hidden, &self.dec_w2, &self.dec_b2)?;
        let mut log_probs = logits.clone();
        for r in 0..log_probs.rows() {
            log_softmax_inplace(log_probs.row_mut(r));
        }
        if !(log_probs.is_finite() && logvar.is_finite() && mu.is_finite()) {
            return Err(Error::Numeric(
                "expert forward produced a non-finite activation".into(),
            ));
        }
        Ok(ForwardCache {
            input,
            hidden,
            mu,
            logvar,
            eps: noise.eps.clone(),
            z,
            dec_hidden,
            logits,
            log_probs,
        })
    }

    /// Forward pass in the given mode; train mode draws dropout and
    /// reparameterization noise from `rngs`.
    pub fn forward(
        &self,
        x: &DenseMatrix<T>,
        mode: Mode,
        dropout: f64,
        rngs: &mut ExpertRngs,
    ) -> Result<ForwardCache<T>> {
        let noise = match mode {
            Mode::Train => ForwardNoise::sample(self.dims, x.rows(), dropout, rngs),
            Mode::Eval => ForwardNoise::none(),
        };
        self.forward_with_noise(x, &noise)
    }

    pub fn forward_eval(&self, x: &DenseMatrix<T>) -> Result<ForwardCache<T>> {
        self.forward_with_noise(x, &ForwardNoise::none())
    }

    /// Backpropagates seeds `dL/dlogits` plus a per-row KL coefficient `c_b`
    /// (the objective contains `Σ_b c_b · KL_b`) to every parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &DenseMatrix<T>,
        kl_coef: &[T],
    ) -> Result<ExpertParams<T>> {
        if dlogits.shape() != cache.logits.shape() || kl_coef.len() != cache.batch() {
            return Err(Error::Dimension("backward seed shapes".into()));
        }
        let half = T::lit(0.5);
        let out = affine_backward(&cache.dec_hidden, &self.dec_w2, dlogits, true)?;
        let (dec_w2, dec_b2) = (out.dw, out.db);
        let mut d_dec_hidden = out.dx.expect("requested");
        tanh_backward_inplace(&cache.dec_hidden, &mut d_dec_hidden);
        let out = affine_backward(&cache.z, &self.dec_w1, &d_dec_hidden, true)?;
        let (dec_w1, dec_b1) = (out.dw, out.db);
        let dz = out.dx.expect("requested");

        let mut dmu = dz.clone();
        let mut dlogvar = DenseMatrix::zeros(dz.rows(), dz.cols());
        if let Some(eps) = &cache.eps {
            for (((d, &g), &lv), &e) in dlogvar
                .as_mut_slice()
                .iter_mut()
                .zip(dz.as_slice())
                .zip(cache.logvar.as_slice())
                .zip(eps.as_slice())
            {
                *d = g * e * half * (lv * half).exp();
            }
        }
        for (b, &c) in kl_coef.iter().enumerate() {
            if c == T::zero() {
                continue;
            }
            let mu = cache.mu.row(b);
            let lv = cache.logvar.row(b);
            for (d, &m) in dmu.row_mut(b).iter_mut().zip(mu) {
                *d += c * m;
            }
            for (d, &l) in dlogvar.row_mut(b).iter_mut().zip(lv) {
                *d += c * half * (l.exp() - T::one());
            }
        }

        let out_mu = affine_backward(&cache.hidden, &self.enc_wmu, &dmu, true)?;
        let out_lv = affine_backward(&cache.hidden, &self.enc_wlv, &dlogvar, true)?;
        let mut dhidden = out_mu.dx.expect("requested");
        for (a, &b) in dhidden
            .as_mut_slice()
            .iter_mut()
            .zip(out_lv.dx.expect("requested").as_slice())
        {
            *a += b;
        }
        tanh_backward_inplace(&cache.hidden, &mut dhidden);
        let out = affine_backward(&cache.input, &self.enc_w1, &dhidden, false)?;
        Ok(ExpertParams {
            dims: self.dims,
            enc_w1: out.dw,
            enc_b1: out.db,
            enc_wmu: out_mu.dw,
            enc_bmu: out_mu.db,
            enc_wlv: out_lv.dw,
            enc_blv: out_lv.db,
            dec_w1,
            dec_b1,
            dec_w2,
            dec_b2,
        })
    }

    /// Loss per row and gradients of `Σ_b w_b (CE_b + β KL_b)` for a forward
    /// pass that has already been run.
    pub fn objective_grads(
        &self,
        cache: &ForwardCache<T>,
        targets: &[&[usize]],
        beta: T,
        row_weights: &[T],
    ) -> Result<(Vec<T>, ExpertParams<T>)> {
        let b = cache.batch();
        if targets.len() != b || row_weights.len() != b {
            return Err(Error::Dimension(
                "targets or row weights do not match batch".into(),
            ));
        }
        let mut dlogits = DenseMatrix::zeros(b, self.dims.items);
        let mut losses = Vec::with_capacity(b);
        let mut kl_coef = Vec::with_capacity(b);
        let mut ones = Vec::new();
        for row in 0..b {
            let lp = cache.log_probs.row(row);
            let t = targets[row];
            let ce = multinomial_ce(lp, t);
            losses.push(ce + beta * cache.kl(row));
            ones.clear();
            ones.resize(t.len(), T::one());
            ce_logit_grad_row(lp, t, &ones, row_weights[row], dlogits.row_mut(row));
            kl_coef.push(row_weights[row] * beta);
        }
        let grads = self.backward(cache, &dlogits, &kl_coef)?;
        Ok((losses, grads))
    }

    /// Forward and backward in one call: gradients of
    /// `Σ_b w_b (CE_b + β KL_b)` under fixed `noise`.
    pub fn expert_backward(
        &self,
        x: &DenseMatrix<T>,
        targets: &[&[usize]],
        beta: T,
        row_weights: &[T],
        noise: &ForwardNoise<T>,
    ) -> Result<(T, ExpertParams<T>)> {
        let cache = self.forward_with_noise(x, noise)?;
        let (losses, grads) = self.objective_grads(&cache, targets, beta, row_weights)?;
        let total = losses
            .iter()
            .zip(row_weights)
            .fold(T::zero(), |acc, (&l, &w)| acc + w * l);
        Ok((total, grads))
    }

    /// Per-user validation cross-entropy in eval composition, divided by the
    /// number of validation items. `None` for users with no validation items.
    pub fn validation_losses(&self, split: &SplitDataset) -> Result<Vec<Option<T>>> {
        let users: Vec<usize> = (0..split.n_users()).collect();
        let mut out = Vec::with_capacity(users.len());
        for block in users.chunks(EVAL_BLOCK) {
            let cache = self.forward_eval(&normalized_inputs(split, block))?;
            for (row, &u) in block.iter().enumerate() {
                out.push(per_item_ce(
                    cache.log_probs.row(row),
                    split.items(u, Fold::Val),
                ));
            }
        }
        Ok(out)
    }
}

/// Users per block in evaluation passes.
pub(crate) const EVAL_BLOCK: usize = 256;

pub(crate) fn per_item_ce<T: Scalar>(log_probs: &[T], items: &[usize]) -> Option<T> {
    (!items.is_empty()).then(|| multinomial_ce(log_probs, items) / T::from_count(items.len()))
}

/// Eval-mode log-probabilities of the training vector, used for ranking.
pub struct ExpertScorer<'a, T> {
    pub params: &'a ExpertParams<T>,
    pub split: &'a SplitDataset,
}

impl<T: Scalar> ScoreSource<T> for ExpertScorer<'_, T> {
    fn n_items(&self) -> usize {
        self.params.dims.items
    }

    fn score_users(&self, users: &[usize]) -> Result<DenseMatrix<T>> {
        Ok(self
            .params
            .forward_eval(&normalized_inputs(self.split, users))?
            .log_probs)
    }
}

pub struct StandaloneOutcome<T> {
    pub best: ExpertParams<T>,
    pub best_epoch: usize,
    pub last: ExpertParams<T>,
    pub history: Vec<EpochRecord>,
}

/// Plain MultVAE training: shuffled minibatches of trainable users, mean
/// batch objective, Adam, and selection of the epoch with the best overall
/// validation NDCG@K.
pub fn train_standalone<T: Scalar>(
    split: &SplitDataset,
    profile: &MainstreamProfile,
    dims: ExpertDims,
    cfg: &TrainConfig,
) -> Result<StandaloneOutcome<T>> {
    cfg.validate()?;
    if dims.items != split.n_items() {
        return Err(Error::Dimension(format!(
            "expert covers {} items, dataset has {}",
            dims.items,
            split.n_items()
        )));
    }
    let mut params = ExpertParams::<T>::init_seeded(dims, cfg.seed, 0);
    let mut opt = params.new_optimizer(cfg.adam);
    let mut rngs = ExpertRngs::new(cfg.seed, 0);
    let mut shuffle = rng::shuffle_stream(cfg.seed);
    let trainable = split.trainable_users();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ExpertParams<T>)> = None;

    for epoch in 1..=cfg.epochs {
        let beta_f = cfg.beta_at(epoch);
        let beta = T::lit(beta_f);
        let mut loss_sum = 0.0;
        for (bi, batch) in epoch_batches(&trainable, cfg.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let x = normalized_inputs::<T>(split, &batch);
            let noise = ForwardNoise::sample(dims, batch.len(), cfg.dropout, &mut rngs);
            let cache = params
                .forward_with_noise(&x, &noise)
                .map_err(|e| at(epoch, bi, e))?;
            let targets: Vec<&[usize]> = batch.iter().map(|&u| split.train_items(u)).collect();
            let coef = T::one() / T::from_count(batch.len());
            let row_w = vec![coef; batch.len()];
            let (losses, grads) = params.objective_grads(&cache, &targets, beta, &row_w)?;
            for l in &losses {
                loss_sum += l.as_f64();
            }
            params
                .apply(&grads, &mut opt)
                .map_err(|e| at(epoch, bi, e))?;
        }
        let train_loss = loss_sum / trainable.len().max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "epoch {epoch}: mean train loss {train_loss}"
            )));
        }
        let scorer = ExpertScorer {
            params: &params,
            split,
        };
        let per_user = per_user_ndcg(&scorer, split, Fold::Val, cfg.k)?;
        let report = BiasReport::aggregate("val", cfg.k, &per_user, profile)?;
        let score = report.overall.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            beta: beta_f,
            val_ndcg: report.overall,
            val_groups: report.groups,
            mean_weights: [None; 5],
            weight_range: None,
            clipped: 0,
        });
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(StandaloneOutcome {
        best,
        best_epoch,
        last: params,
        history,
    })
}

pub(crate) fn at(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Diverged(m) => Error::Diverged(format!("epoch {epoch}, batch {batch}: {m}")),
        Error::Numeric(m) => Error::Diverged(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ExpertDims {
        ExpertDims::new(10, 8, 4).unwrap()
    }

    fn random_input(rng: &mut impl Rng, b: usize, m: usize) -> (DenseMatrix<f64>, Vec<Vec<usize>>) {
        let targets: Vec<Vec<usize>> = (0..b)
            .map(|_| {
                let mut t: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.35)).collect();
                if t.is_empty() {
                    t.push(rng.random_range(0..m));
                }
                t
            })
            .collect();
        let mut x = DenseMatrix::zeros(b, m);
        for (r, t) in targets.iter().enumerate() {
            let v = 1.0 / (t.len() as f64).sqrt();
            for &i in t {
                x.set(r, i, v);
            }
        }
        (x, targets)
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = ExpertParams::<f64>::init_seeded(dims(), 5, 0);
        let b = ExpertParams::<f64>::init_seeded(dims(), 5, 0);
        assert_eq!(
            a.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.enc_w1.shape(), (10, 8));
        assert!(a.enc_b1.iter().all(|&v| v == 0.0));
        let c = ExpertParams::<f64>::init_seeded(dims(), 5, 1);
        assert_ne!(a, c);
    }

    #[test]
    fn init_distribution_mean() {
        // U(−b, b) has variance b²/3; the mean of n draws has σ = b/√(3n).
        let d = ExpertDims::new(200, 50, 4).unwrap();
        let p = ExpertParams::<f64>::init_seeded(d, 17, 0);
        let w = p.enc_w1.as_slice();
        assert_eq!(w.len(), 10_000);
        let bound = (6.0f64 / 250.0).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sigma = bound / (3.0 * w.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}, 3σ {}", 3.0 * sigma);
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let p = ExpertParams::<f64>::init_seeded(dims(), 1, 0);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let (x, _) = random_input(&mut r, 3, 10);
        let a = p.forward_eval(&x).unwrap();
        let b = p.forward_eval(&x).unwrap();
        assert_eq!(a.logits, b.logits);
        let out = a.output(0);
        let total: f64 = out.probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(out.probs.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_input_is_finite() {
        let mut p = ExpertParams::<f64>::init_seeded(dims(), 1, 0);
        p.enc_b1.iter_mut().for_each(|b| *b = 0.3);
        let x = DenseMatrix::zeros(1, 10);
        let cache = p.forward_eval(&x).unwrap();
        assert!(cache.logits.is_finite());
        // Encoder of zero is tanh(b1); decoder applied to its mean head.
        let h: Vec<f64> = p.enc_b1.iter().map(|b| b.tanh()).collect();
        assert_eq!(cache.hidden.row(0), h.as_slice());
    }

    #[test]
    fn train_forward_is_reproducible_under_seed() {
        let p = ExpertParams::<f64>::init_seeded(dims(), 1, 0);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let (x, _) = random_input(&mut r, 3, 10);
        let a = p
            .forward(&x, Mode::Train, 0.5, &mut ExpertRngs::new(9, 0))
            .unwrap();
        let b = p
            .forward(&x, Mode::Train, 0.5, &mut ExpertRngs::new(9, 0))
            .unwrap();
        assert_eq!(a.logits, b.logits);
        let c = p
            .forward(&x, Mode::Train, 0.5, &mut ExpertRngs::new(10, 0))
            .unwrap();
        assert_ne!(a.logits, c.logits);
    }

    #[test]
    fn loss_cases() {
        let out = ExpertOutput {
            logits: vec![0.7; 8],
            probs: vec![0.125; 8],
            mu: vec![0.0; 4],
            logvar: vec![0.0; 4],
        };
        assert_eq!(kl_divergence(&out.mu, &out.logvar), 0.0);
        let l = expert_loss(&out, &[1, 4, 6], 0.0);
        assert!((l - 3.0 * 8f64.ln()).abs() < 1e-12);

        let shifted = ExpertOutput {
            mu: vec![0.5, -0.2, 0.0, 0.1],
            logvar: vec![0.3, 0.0, -0.4, 0.0],
            ..out.clone()
        };
        let kl = kl_divergence(&shifted.mu, &shifted.logvar);
        assert!(kl > 0.0);
        assert!(expert_loss(&shifted, &[1], 1.0) > expert_loss(&shifted, &[1], 0.0));
        assert_eq!(expert_loss(&out, &[], 0.0), 0.0);
    }

    #[test]
    fn loss_is_shift_invariant_in_logits() {
        let out = ExpertOutput {
            logits: vec![0.1, -2.0, 1.3, 0.4],
            probs: vec![],
            mu: vec![0.2],
            logvar: vec![-0.1],
        };
        let moved = ExpertOutput {
            logits: out.logits.iter().map(|v| v + 37.5).collect(),
            ..out.clone()
        };
        let a: f64 = expert_loss(&out, &[0, 2], 0.4);
        let b = expert_loss(&moved, &[0, 2], 0.4);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn empty_target_gives_zero_ce_gradient() {
        let p = ExpertParams::<f64>::init_seeded(dims(), 3, 0);
        let x = DenseMatrix::zeros(2, 10);
        let (loss, grads) = p
            .expert_backward(&x, &[&[], &[]], 0.0, &[0.5, 0.5], &ForwardNoise::none())
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(40);
        for draw in 0..5 {
            let p = ExpertParams::<f64>::init_seeded(dims(), draw, 0);
            let (x, targets) = random_input(&mut r, 3, 10);
            let t: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
            let mut rngs = ExpertRngs::new(draw, 0);
            let noise = ForwardNoise::sample(dims(), 3, 0.5, &mut rngs);
            let w = [0.5, 1.0, 0.25];
            let (_, grads) = p.expert_backward(&x, &t, 0.7, &w, &noise).unwrap();
            let mut probe = p.clone();
            let err = grad_check(
                |flat| {
                    probe.set_flat(flat).unwrap();
                    probe.expert_backward(&x, &t, 0.7, &w, &noise).unwrap().0
                },
                &grads.flatten(),
                &p.flatten(),
                1e-5,
            );
            assert!(err < 1e-4, "draw {draw}: {err}");
        }
    }

    #[test]
    fn identical_inputs_give_identical_grads() {
        let p = ExpertParams::<f64>::init_seeded(dims(), 3, 0);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let (x, targets) = random_input(&mut r, 4, 10);
        let t: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        let noise = ForwardNoise::sample(dims(), 4, 0.5, &mut ExpertRngs::new(1, 0));
        let a = p
            .expert_backward(&x, &t, 0.2, &[0.25; 4], &noise)
            .unwrap()
            .1;
        let b = p
            .expert_backward(&x, &t, 0.2, &[0.25; 4], &noise)
            .unwrap()
            .1;
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let p = ExpertParams::<f64>::init_seeded(dims(), 3, 0);
        assert!(matches!(
            p.forward_eval(&DenseMatrix::zeros(1, 9)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn f32_forward_runs() {
        let p = ExpertParams::<f32>::init_seeded(dims(), 3, 0);
        let x = DenseMatrix::<f32>::from_fn(2, 10, |r, c| ((r + c) % 3 == 0) as u8 as f32);
        let cache = p.forward_eval(&x).unwrap();
        let s: f32 = cache.output(1).probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}
