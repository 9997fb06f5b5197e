//! PPO from scratch: tanh MLPs with analytic backprop, a diagonal Gaussian
//! policy with state-independent log-std, GAE, the clipped surrogate loss,
//! Adam with global gradient-norm clipping and the minibatch/epoch loop.

use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Fully connected network: tanh on hidden layers, linear output.
///
/// Layer `i` stores its weight as a column-major `dims[i] x dims[i+1]`
/// block followed by its bias, so a batch `X` (rows = samples) maps to
/// `X W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dims: Vec<usize>,
    pub flat: Vec<f64>,
}

impl MlpParams {
    pub fn param_count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Dimension(format!("invalid layer dims {dims:?}")));
        }
        Ok(Self { dims: dims.to_vec(), flat: vec![0.0; Self::param_count(dims)] })
    }

    /// Orthogonal weights scaled by `hidden_gain` (last layer: `out_gain`), zero biases.
    pub fn orthogonal<R: Rng + ?Sized>(dims: &[usize], hidden_gain: f64, out_gain: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        for layer in 0..p.n_layers() {
            let (din, dout) = (dims[layer], dims[layer + 1]);
            let gain = if layer + 1 == p.n_layers() { out_gain } else { hidden_gain };
            let w = orthogonal_matrix(din, dout, rng) * gain;
            let off = p.offset(layer);
            p.flat[off..off + din * dout].copy_from_slice(w.as_slice());
        }
        Ok(p)
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn offset(&self, layer: usize) -> usize {
        Self::param_count(&self.dims[..=layer])
    }

    pub fn weight(&self, layer: usize) -> DMatrixView<'_, f64> {
        let (din, dout) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.offset(layer);
        DMatrixView::from_slice(&self.flat[off..off + din * dout], din, dout)
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (din, dout) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.offset(layer) + din * dout;
        &self.flat[off..off + dout]
    }

    /// (weight, bias) pairs in order.
    pub fn layers(&self) -> Vec<(DMatrixView<'_, f64>, &[f64])> {
        (0..self.n_layers()).map(|i| (self.weight(i), self.bias(i))).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!("mlp input has {} entries, expected {}", x.len(), self.input_dim())));
        }
        let out = self.forward_batch(&DMatrix::from_row_slice(1, x.len(), x));
        Ok(out.last().unwrap().as_slice().to_vec())
    }

    /// Activations of every layer for a batch, input first, output last.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(x.clone());
        for layer in 0..self.n_layers() {
            let mut z = acts.last().unwrap() * self.weight(layer);
            for (j, b) in self.bias(layer).iter().enumerate() {
                z.column_mut(j).add_scalar_mut(*b);
            }
            if layer + 1 < self.n_layers() {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Accumulates dLoss/dparams into `grad` given dLoss/doutput.
    pub fn backward(&self, acts: &[DMatrix<f64>], grad_out: DMatrix<f64>, grad: &mut [f64]) {
        let mut g = grad_out;
        for layer in (0..self.n_layers()).rev() {
            let (din, dout) = (self.dims[layer], self.dims[layer + 1]);
            let off = self.offset(layer);
            let input = &acts[layer];
            {
                let mut dw = DMatrixViewMut::from_slice(&mut grad[off..off + din * dout], din, dout);
                dw.gemm_tr(1.0, input, &g, 1.0);
            }
            for (j, db) in grad[off + din * dout..off + din * dout + dout].iter_mut().enumerate() {
                *db += g.column(j).sum();
            }
            if layer > 0 {
                let mut prev = &g * self.weight(layer).transpose();
                prev.zip_apply(input, |gv, a| *gv *= 1.0 - a * a);
                g = prev;
            }
        }
    }
}

fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let (r, c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let diag = qr.r().diagonal();
    for (j, d) in diag.iter().enumerate() {
        if *d < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

/// Diagonal Gaussian over raw TPM entries with a state-independent log-std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean: MlpParams,
    pub log_std: Vec<f64>,
}

pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, mu), ls)| {
            let ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let z = (a - mu) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// Policy initialization: orthogonal gain of the mean head and initial log-std.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyInit {
    pub head_gain: f64,
    pub log_std: f64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        Self { head_gain: 0.01, log_std: 0.0 }
    }
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], act_dim: usize, rng: &mut R) -> Result<Self> {
        Self::with_init(obs_dim, hidden, act_dim, PolicyInit::default(), rng)
    }

    pub fn with_init<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        act_dim: usize,
        init: PolicyInit,
        rng: &mut R,
    ) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(obs_dim).chain(hidden.iter().copied()).chain([act_dim]).collect();
        Ok(Self {
            mean: MlpParams::orthogonal(&dims, SQRT_2, init.head_gain, rng)?,
            log_std: vec![init.log_std; act_dim],
        })
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn clamped_log_std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.mean.forward(state)
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(gaussian_log_prob(action, &self.mean_action(state)?, &self.log_std))
    }

    /// a = mu(s) + sigma * z with z ~ N(0, I).
    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let mu = self.mean_action(state)?;
        let ls = self.clamped_log_std();
        let action: Vec<f64> =
            mu.iter().zip(&ls).map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal)).collect();
        let lp = gaussian_log_prob(&action, &mu, &ls);
        Ok((action, lp))
    }

    pub fn entropy(&self) -> f64 {
        let d = self.act_dim() as f64;
        self.clamped_log_std().iter().sum::<f64>() + 0.5 * d * (1.0 + (2.0 * PI).ln())
    }
}

/// Policy and value network trained together by one optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub policy: GaussianPolicy,
    pub critic: MlpParams,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        actor_hidden: &[usize],
        critic_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(obs_dim, act_dim, actor_hidden, critic_hidden, PolicyInit::default(), rng)
    }

    pub fn with_init<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        actor_hidden: &[usize],
        critic_hidden: &[usize],
        init: PolicyInit,
        rng: &mut R,
    ) -> Result<Self> {
        let policy = GaussianPolicy::with_init(obs_dim, actor_hidden, act_dim, init, rng)?;
        let dims: Vec<usize> = std::iter::once(obs_dim).chain(critic_hidden.iter().copied()).chain([1]).collect();
        let critic = MlpParams::orthogonal(&dims, SQRT_2, 1.0, rng)?;
        Ok(Self { policy, critic })
    }

    pub fn param_count(&self) -> usize {
        self.policy.mean.flat.len() + self.policy.log_std.len() + self.critic.flat.len()
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(state)?[0])
    }

    /// Parameters in gradient order: actor, log-std, critic.
    pub fn blocks_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.policy.mean.flat, &mut self.policy.log_std, &mut self.critic.flat]
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.policy.mean.flat.clone();
        out.extend(&self.policy.log_std);
        out.extend(&self.critic.flat);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut at = 0;
        for block in self.blocks_mut() {
            block.copy_from_slice(&flat[at..at + block.len()]);
            at += block.len();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyperParams {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub minibatches: usize,
    pub clip_eps: f64,
    pub max_grad_norm: f64,
    /// Value-loss coefficient c1.
    pub vf_coef: f64,
    /// Entropy coefficient c2.
    pub ent_coef: f64,
    pub epochs: usize,
    pub rollout_len: usize,
    pub normalize_advantages: bool,
}

impl Default for PpoHyperParams {
    fn default() -> Self {
        Self::stage1()
    }
}

impl PpoHyperParams {
    pub fn stage1() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            learning_rate: 0.003,
            minibatches: 32,
            clip_eps: 0.1,
            max_grad_norm: 1.0,
            vf_coef: 0.1,
            ent_coef: 0.001,
            epochs: 30,
            rollout_len: 512,
            normalize_advantages: true,
        }
    }

    pub fn stage2() -> Self {
        Self {
            gamma: 0.95,
            gae_lambda: 0.9,
            learning_rate: 0.004,
            minibatches: 6,
            clip_eps: 0.01,
            max_grad_norm: 0.6,
            vf_coef: 0.01,
            ent_coef: 0.1,
            epochs: 10,
            rollout_len: 512,
            normalize_advantages: true,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        let fail = |msg: String| Err(Error::Config(format!("{name}.{msg}")));
        if !unit(self.gamma) {
            return fail(format!("gamma must be in (0, 1] (got {})", self.gamma));
        }
        if !unit(self.gae_lambda) {
            return fail(format!("gae_lambda must be in (0, 1] (got {})", self.gae_lambda));
        }
        if !(self.clip_eps > 0.0) {
            return fail(format!("clip_eps must be positive (got {})", self.clip_eps));
        }
        if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0) {
            return fail("learning_rate and max_grad_norm must be positive".into());
        }
        if !(self.vf_coef >= 0.0 && self.ent_coef >= 0.0) {
            return fail("vf_coef and ent_coef must be nonnegative".into());
        }
        if self.rollout_len == 0 || self.minibatches == 0 || self.minibatches > self.rollout_len {
            return fail(format!(
                "minibatches must be in 1..=rollout_len (got {} for {})",
                self.minibatches, self.rollout_len
            ));
        }
        Ok(())
    }
}

/// Reverse-recursion GAE with a bootstrap value after the last step.
pub fn gae(rewards: &[f64], values: &[f64], last_value: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    gae_masked(rewards, values, &vec![false; rewards.len()], last_value, gamma, lambda)
}

/// GAE where `done[t]` cuts bootstrapping after step `t`.
pub fn gae_masked(
    rewards: &[f64],
    values: &[f64],
    done: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let live = if done[t] { 0.0 } else { 1.0 };
        let next = if t + 1 < n { values[t + 1] } else { last_value };
        let delta = rewards[t] + gamma * next * live - values[t];
        acc = delta + gamma * lambda * live * acc;
        adv[t] = acc;
    }
    adv
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Per-step trajectory storage for one learner.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self { obs_dim, act_dim, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn is_finalized(&self) -> bool {
        !self.is_empty() && self.advantages.len() == self.len()
    }

    pub fn push(
        &mut self,
        state: &[f64],
        action: &[f64],
        log_prob: f64,
        value: f64,
        reward: f64,
        done: bool,
    ) -> Result<()> {
        if state.len() != self.obs_dim || action.len() != self.act_dim {
            return Err(Error::Dimension(format!(
                "rollout step has state {} / action {}, expected {} / {}",
                state.len(),
                action.len(),
                self.obs_dim,
                self.act_dim
            )));
        }
        self.states.extend_from_slice(state);
        self.actions.extend_from_slice(action);
        self.log_probs.push(log_prob);
        self.values.push(value);
        self.rewards.push(reward);
        self.dones.push(done);
        self.advantages.clear();
        self.returns.clear();
        Ok(())
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }

    /// Fills advantages (GAE) and returns (advantage + value).
    pub fn finalize(&mut self, last_value: f64, gamma: f64, lambda: f64) {
        self.advantages = gae_masked(&self.rewards, &self.values, &self.dones, last_value, gamma, lambda);
        self.returns = self.advantages.iter().zip(&self.values).map(|(a, v)| a + v).collect();
    }

    pub fn clear(&mut self) {
        *self = Self::new(self.obs_dim, self.act_dim);
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            states: DMatrix::from_fn(idx.len(), self.obs_dim, |r, c| self.states[idx[r] * self.obs_dim + c]),
            actions: DMatrix::from_fn(idx.len(), self.act_dim, |r, c| self.actions[idx[r] * self.act_dim + c]),
            old_log_probs: idx.iter().map(|&i| self.log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
            value_targets: idx.iter().map(|&i| self.returns[i]).collect(),
        }
    }
}

/// A minibatch, rows = samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.old_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_probs.is_empty()
    }

    /// Rescales advantages to zero mean and unit std (no-op below two samples).
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len();
        if n < 2 {
            return;
        }
        let mean = self.advantages.iter().sum::<f64>() / n as f64;
        let var = self.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt() + 1e-12;
        for a in &mut self.advantages {
            *a = (*a - mean) / std;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Minimized objective -(L_clip - c1 L_VF + c2 H).
    pub loss: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Gradient in `ActorCritic::flat_params` order.
    pub grad: Vec<f64>,
}

pub fn total_loss(batch: &Batch, ac: &ActorCritic, clip_eps: f64, c1: f64, c2: f64) -> Result<LossOutput> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Dimension("empty minibatch".into()));
    }
    let nb = b as f64;
    let policy = &ac.policy;
    let ls = policy.clamped_log_std();
    let inv_var: Vec<f64> = ls.iter().map(|l| (-2.0 * l).exp()).collect();
    let actor_acts = policy.mean.forward_batch(&batch.states);
    let mu = actor_acts.last().unwrap();
    let critic_acts = ac.critic.forward_batch(&batch.states);
    let values = critic_acts.last().unwrap();
    if mu.iter().chain(values.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite network output (actor max |w| = {:.3e}, critic max |w| = {:.3e})",
            policy.mean.flat.iter().fold(0.0f64, |m, x| m.max(x.abs())),
            ac.critic.flat.iter().fold(0.0f64, |m, x| m.max(x.abs()))
        )));
    }

    let act_dim = policy.act_dim();
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    let mut g_mu = DMatrix::zeros(b, act_dim);
    let mut g_ls = vec![0.0; act_dim];
    let (mut surrogate, mut kl, mut clipped) = (0.0, 0.0, 0usize);
    for r in 0..b {
        let mut logp = 0.0;
        for i in 0..act_dim {
            let d = batch.actions[(r, i)] - mu[(r, i)];
            logp += -0.5 * d * d * inv_var[i] - ls[i] - half_ln_2pi;
        }
        let log_ratio = logp - batch.old_log_probs[r];
        let ratio = log_ratio.exp();
        let adv = batch.advantages[r];
        let unclipped = ratio * adv;
        let clipped_val = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        surrogate += unclipped.min(clipped_val);
        kl += (ratio - 1.0) - log_ratio;
        if (ratio - 1.0).abs() > clip_eps {
            clipped += 1;
        }
        // d(-L_clip)/d logp; the clipped branch is flat in the parameters
        let w = if unclipped <= clipped_val { -unclipped / nb } else { 0.0 };
        if w != 0.0 {
            for i in 0..act_dim {
                let d = batch.actions[(r, i)] - mu[(r, i)];
                g_mu[(r, i)] = w * d * inv_var[i];
                g_ls[i] += w * (d * d * inv_var[i] - 1.0);
            }
        }
    }
    surrogate /= nb;

    let mut value_loss = 0.0;
    let mut g_v = DMatrix::zeros(b, 1);
    for r in 0..b {
        let e = values[(r, 0)] - batch.value_targets[r];
        value_loss += e * e;
        g_v[(r, 0)] = c1 * 2.0 * e / nb;
    }
    value_loss /= nb;

    let entropy = policy.entropy();
    for (g, raw) in g_ls.iter_mut().zip(&policy.log_std) {
        *g -= c2;
        if *raw < LOG_STD_MIN || *raw > LOG_STD_MAX {
            *g = 0.0;
        }
    }

    let n_actor = policy.mean.flat.len();
    let mut grad = vec![0.0; ac.param_count()];
    policy.mean.backward(&actor_acts, g_mu, &mut grad[..n_actor]);
    grad[n_actor..n_actor + act_dim].copy_from_slice(&g_ls);
    ac.critic.backward(&critic_acts, g_v, &mut grad[n_actor + act_dim..]);

    let loss = -(surrogate - c1 * value_loss + c2 * entropy);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite loss {loss} (surrogate {surrogate}, value loss {value_loss}, entropy {entropy})"
        )));
    }
    Ok(LossOutput {
        loss,
        surrogate,
        value_loss,
        entropy,
        approx_kl: kl / nb,
        clip_fraction: clipped as f64 / nb,
        grad,
    })
}

/// Scales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One update over parameter blocks laid out consecutively in `grad`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        for block in params.iter_mut() {
            for p in block.iter_mut() {
                let g = grad[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                i += 1;
            }
        }
    }
}

/// One PPO learner: networks, optimizer and its own shuffling stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub net: ActorCritic,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(net: ActorCritic, lr: f64, seed: u64) -> Self {
        let n = net.param_count();
        Self { net, adam: Adam::new(n, lr), rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainStats {
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Batch clipped surrogate (raw advantages) before and after the update.
    pub surrogate_before: f64,
    pub surrogate_after: f64,
}

/// Splits `n` items into `parts` near-equal contiguous chunk lengths.
pub fn chunk_sizes(n: usize, parts: usize) -> Vec<usize> {
    let parts = parts.clamp(1, n.max(1));
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

/// Clipped surrogate of the current policy on the whole buffer.
pub fn buffer_surrogate(buffer: &RolloutBuffer, ac: &ActorCritic, clip_eps: f64) -> Result<f64> {
    let idx: Vec<usize> = (0..buffer.len()).collect();
    let batch = buffer.batch(&idx);
    let mu = ac.policy.mean.forward_batch(&batch.states).pop().unwrap();
    let mut acc = 0.0;
    for r in 0..batch.len() {
        let mean: Vec<f64> = mu.row(r).iter().copied().collect();
        let action: Vec<f64> = batch.actions.row(r).iter().copied().collect();
        let ratio = (gaussian_log_prob(&action, &mean, &ac.policy.log_std) - batch.old_log_probs[r]).exp();
        acc += clipped_surrogate(ratio, batch.advantages[r], clip_eps);
    }
    Ok(acc / batch.len() as f64)
}

/// `hp.epochs` passes over the shuffled buffer in `hp.minibatches` chunks.
pub fn train_iteration(buffer: &RolloutBuffer, learner: &mut Learner, hp: &PpoHyperParams) -> Result<TrainStats> {
    if !buffer.is_finalized() {
        return Err(Error::Dimension("rollout buffer must be finalized before training".into()));
    }
    let n = buffer.len();
    let mut stats = TrainStats { mean_reward: buffer.rewards.iter().sum::<f64>() / n as f64, ..TrainStats::default() };
    stats.surrogate_before = buffer_surrogate(buffer, &learner.net, hp.clip_eps)?;
    let sizes = chunk_sizes(n, hp.minibatches);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut updates = 0usize;
    for _ in 0..hp.epochs {
        idx.shuffle(&mut learner.rng);
        let mut start = 0;
        for &size in &sizes {
            let mut batch = buffer.batch(&idx[start..start + size]);
            start += size;
            if hp.normalize_advantages {
                batch.normalize_advantages();
            }
            let mut out = total_loss(&batch, &learner.net, hp.clip_eps, hp.vf_coef, hp.ent_coef)?;
            clip_grad_norm(&mut out.grad, hp.max_grad_norm);
            learner.adam.lr = hp.learning_rate;
            learner.adam.step(&mut learner.net.blocks_mut(), &out.grad);
            stats.policy_loss += -out.surrogate;
            stats.value_loss += out.value_loss;
            stats.entropy += out.entropy;
            stats.approx_kl += out.approx_kl;
            stats.clip_fraction += out.clip_fraction;
            updates += 1;
        }
    }
    if updates > 0 {
        let u = updates as f64;
        stats.policy_loss /= u;
        stats.value_loss /= u;
        stats.entropy /= u;
        stats.approx_kl /= u;
        stats.clip_fraction /= u;
    }
    if !learner.net.is_finite() {
        return Err(Error::Divergence("parameters became non-finite after update".into()));
    }
    stats.surrogate_after = buffer_surrogate(buffer, &learner.net, hp.clip_eps)?;
    Ok(stats)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DSPPOCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a set of learners.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub episode: u64,
    pub learners: Vec<(String, Learner)>,
    /// Driver-level random stream (action sampling).
    pub rng: ChaCha8Rng,
}

fn put_u32<W: Write>(w: &mut W, x: u32) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_u64<W: Write>(w: &mut W, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    put_u64(w, xs.len() as u64)?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn put_rng<W: Write>(w: &mut W, rng: &ChaCha8Rng) -> std::io::Result<()> {
    w.write_all(&rng.get_seed())?;
    put_u64(w, rng.get_stream())?;
    w.write_all(&rng.get_word_pos().to_le_bytes())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::Checkpoint(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| Ok(self.u64()? as usize)).collect()
    }

    fn mlp(&mut self) -> Result<MlpParams> {
        let dims = self.dims()?;
        let flat = self.f64s()?;
        if dims.len() < 2 || flat.len() != MlpParams::param_count(&dims) {
            return Err(Error::Checkpoint(format!("parameter count does not match dims {dims:?}")));
        }
        Ok(MlpParams { dims, flat })
    }

    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.take(32)?.try_into().unwrap();
        let stream = self.u64()?;
        let word_pos = u128::from_le_bytes(self.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

fn put_mlp<W: Write>(w: &mut W, p: &MlpParams) -> std::io::Result<()> {
    put_u64(w, p.dims.len() as u64)?;
    for d in &p.dims {
        put_u64(w, *d as u64)?;
    }
    put_f64s(w, &p.flat)
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        put_u64(w, self.episode)?;
        put_rng(w, &self.rng)?;
        put_u64(w, self.learners.len() as u64)?;
        for (name, l) in &self.learners {
            put_u64(w, name.len() as u64)?;
            w.write_all(name.as_bytes())?;
            put_mlp(w, &l.net.policy.mean)?;
            put_f64s(w, &l.net.policy.log_std)?;
            put_mlp(w, &l.net.critic)?;
            for x in [l.adam.lr, l.adam.beta1, l.adam.beta2, l.adam.eps] {
                w.write_all(&x.to_le_bytes())?;
            }
            put_u64(w, l.adam.t)?;
            put_f64s(w, &l.adam.m)?;
            put_f64s(w, &l.adam.v)?;
            put_rng(w, &l.rng)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let episode = r.u64()?;
        let rng = r.rng()?;
        let n = r.len()?;
        let mut learners = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.len()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("learner name is not utf-8".into()))?;
            let mean = r.mlp()?;
            let log_std = r.f64s()?;
            let critic = r.mlp()?;
            let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let t = r.u64()?;
            let m = r.f64s()?;
            let v = r.f64s()?;
            let lrng = r.rng()?;
            let net = ActorCritic { policy: GaussianPolicy { mean, log_std }, critic };
            if m.len() != net.param_count() || v.len() != net.param_count() {
                return Err(Error::Checkpoint(format!("optimizer state size mismatch for {name}")));
            }
            learners.push((name, Learner { net, adam: Adam { lr, beta1, beta2, eps, t, m, v }, rng: lrng }));
        }
        if !r.buf.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
        }
        Ok(Self { episode, learners, rng })
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_gives_zero_output() {
        let p = MlpParams::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(p.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut p = MlpParams::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            p.flat[i * 3 + i] = 1.0;
        }
        assert_eq!(p.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(matches!(p.forward(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn orthogonal_init_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::orthogonal(&[8, 5, 12], 1.0, 1.0, &mut rng).unwrap();
        let w0 = p.weight(0).into_owned();
        let g = w0.transpose() * &w0;
        assert!((g - DMatrix::identity(5, 5)).abs().max() < 1e-12);
        let w1 = p.weight(1).into_owned();
        let g = &w1 * w1.transpose();
        assert!((g - DMatrix::identity(5, 5)).abs().max() < 1e-12);
        assert!(p.bias(0).iter().all(|b| *b == 0.0));
    }

    #[test]
    fn log_prob_at_mean_unit_sigma() {
        let lp = gaussian_log_prob(&[0.3], &[0.3], &[0.0]);
        assert!((lp - (-0.5 * (2.0 * PI).ln())).abs() < 1e-15);
        assert!((lp + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn tiny_sigma_samples_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pol = GaussianPolicy::new(4, &[8], 3, &mut rng).unwrap();
        pol.log_std = vec![-25.0; 3];
        let s = [0.1, 0.2, -0.3, 0.4];
        let (a, _) = pol.sample(&s, &mut rng).unwrap();
        let mu = pol.mean_action(&s).unwrap();
        for (x, m) in a.iter().zip(&mu) {
            assert!((x - m).abs() < 1e-7);
        }
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(1.0, 1.0, 0.1), 1.0);
        assert!((clipped_surrogate(1.5, 1.0, 0.1) - 1.1).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.1) - (-0.9)).abs() < 1e-15);
    }

    #[test]
    fn gae_special_cases() {
        let adv = gae(&[1.0], &[0.5], 2.0, 0.9, 0.95);
        assert!((adv[0] - (1.0 + 0.9 * 2.0 - 0.5)).abs() < 1e-15);
        let r = [1.0, -1.0, 0.5];
        let v = [0.2, 0.1, -0.3];
        let adv = gae(&r, &v, 0.7, 0.9, 0.0);
        let next = [0.1, -0.3, 0.7];
        for t in 0..3 {
            assert!((adv[t] - (r[t] + 0.9 * next[t] - v[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut x = vec![1.0];
        let mut adam = Adam::new(1, 0.1);
        adam.step(&mut [&mut x], &[0.0]);
        assert_eq!(x, vec![1.0]);
        let mut adam = Adam::new(1, 0.1);
        adam.step(&mut [&mut x], &[1.0]);
        assert!((x[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn grad_norm_clipping_scales() {
        let mut g = vec![6.0, 8.0];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert_eq!(norm, 10.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn chunking_covers_everything() {
        assert_eq!(chunk_sizes(512, 6), vec![86, 86, 85, 85, 85, 85]);
        assert_eq!(chunk_sizes(512, 32), vec![16; 32]);
        assert_eq!(chunk_sizes(3, 5).iter().sum::<usize>(), 3);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ActorCritic::new(6, 4, &[5, 5], &[7, 3], &mut rng).unwrap();
        let mut learner = Learner::new(net, 0.01, 9);
        learner.adam.t = 3;
        learner.adam.m.iter_mut().enumerate().for_each(|(i, m)| *m = i as f64 * 1e-3);
        let _: u64 = learner.rng.gen();
        let ck = Checkpoint { episode: 12, learners: vec![("slot0".into(), learner)], rng };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
