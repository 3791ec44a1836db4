//! Clipped-surrogate PPO with generalized advantage estimation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub horizon: usize,
    pub samples_per_iter: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.005,
            value_coef: 0.5,
            lr_policy: 2e-4,
            lr_value: 2e-4,
            horizon: 999,
            samples_per_iter: 16_384,
            minibatch: 1_024,
            epochs: 3,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: &str| Err(TensorError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("gamma and lambda must lie in (0, 1]");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 || self.lr_policy < 0.0 || self.lr_value < 0.0 {
            return bad("coefficients and learning rates must be non-negative");
        }
        if self.horizon == 0 || self.samples_per_iter == 0 || self.minibatch == 0 || self.epochs == 0 {
            return bad("horizon, samples_per_iter, minibatch and epochs must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// Advantages and returns of one contiguous stream of transitions.
/// `dones[t]` marks a terminal transition (no bootstrap past it);
/// `bootstrap` is `V` of the state after the last transition and is
/// ignored when that transition is terminal.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(TensorError::Shape(format!(
            "gae: {n} rewards, {} values, {} dones",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// The explicit double sum `A_t = Σ_l (γλ)^l δ_{t+l}`, truncated at the
/// end of the episode containing `t`.
pub fn gae_brute_force(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta = |t: usize| {
        let next = if dones[t] {
            0.0
        } else if t + 1 < n {
            values[t + 1]
        } else {
            bootstrap
        };
        rewards[t] + gamma * next - values[t]
    };
    (0..n)
        .map(|t| {
            let mut end = t;
            while end + 1 < n && !dones[end] {
                end += 1;
            }
            (t..=end).map(|k| (gamma * lambda).powi((k - t) as i32) * delta(k)).sum()
        })
        .collect()
}

/// `(a - mean) / (std + 1e-8)` with the population standard deviation.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.is_empty() {
        return Vec::new();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

/// Loss terms of one minibatch, recorded on the tape.
pub struct PpoLosses {
    /// Mean clipped surrogate `L_clip` (to be maximized).
    pub clip: Var,
    pub value: Var,
    pub entropy: Var,
    /// `−L_clip + β_V L_V − β_H H`
    pub total: Var,
    pub ratio: Var,
}

/// Builds the PPO objective from new log-probs, entropies and values
/// (all `[B]`) against stored data.
pub fn ppo_losses<T: Real>(
    tape: &Tape<T>,
    logp: Var,
    entropy: Var,
    value: Var,
    logp_old: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
) -> Result<PpoLosses, TensorError> {
    let b = logp_old.len();
    if b == 0 {
        return Err(TensorError::Empty("ppo batch"));
    }
    if advantages.len() != b || returns.len() != b || tape.shape(logp) != [b] {
        return Err(TensorError::Shape("ppo batch fields disagree in length".into()));
    }
    let vec = |v: &[f64]| tape.constant(Tensor::from_f64(&[v.len()], v)?);
    let old = vec(logp_old)?;
    let adv = vec(advantages)?;
    let ratio = tape.exp(tape.sub(logp, old)?)?;
    let unclipped = tape.mul(ratio, adv)?;
    let clipped = tape.mul(tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?, adv)?;
    let clip = tape.mean_all(tape.minimum(unclipped, clipped)?)?;
    let err = tape.sub(value, vec(returns)?)?;
    let value_loss = tape.mean_all(tape.square(err)?)?;
    let ent = tape.mean_all(entropy)?;
    let total = tape.add(
        tape.neg(clip)?,
        tape.sub(tape.scale(value_loss, cfg.value_coef)?, tape.scale(ent, cfg.entropy_coef)?)?,
    )?;
    Ok(PpoLosses {
        clip,
        value: value_loss,
        entropy: ent,
        total,
        ratio,
    })
}

/// Scales every gradient so the global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-6));
        for (_, g) in grads.iter_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

/// A model PPO can optimize: evaluates stored samples on a fresh tape.
pub trait ActorCritic<T: Real> {
    type Sample;

    /// `(logp, entropy, value)`, each `[B]`, for a minibatch of samples.
    fn evaluate_batch(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        batch: &[&Self::Sample],
    ) -> Result<(Var, Var, Var), TensorError>;

    /// Parameters driven by the policy optimizer (shared trunk + actor).
    fn policy_params(&self) -> Vec<ParamId>;

    /// Parameters driven by the value optimizer.
    fn value_params(&self) -> Vec<ParamId>;
}

/// On-policy data for one update.
pub struct Rollout<S> {
    pub samples: Vec<S>,
    pub logp_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss_clip: f64,
    pub loss_value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
    /// Mean raw (pre-normalization) advantage of the batch.
    pub adv_mean: f64,
    pub minibatches: usize,
}

/// The two optimizers of an actor-critic.
pub struct PpoOptimizers<T: Real> {
    pub policy: Adam<T>,
    pub value: Adam<T>,
}

impl<T: Real> PpoOptimizers<T> {
    pub fn new<M: ActorCritic<T>>(model: &M, store: &ParamStore<T>, cfg: &PpoConfig) -> Self {
        let adam = |lr| AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        Self {
            policy: Adam::new(store, model.policy_params(), adam(cfg.lr_policy)),
            value: Adam::new(store, model.value_params(), adam(cfg.lr_value)),
        }
    }
}

/// `epochs` passes of shuffled minibatch steps over `rollout`.
/// A non-finite loss aborts with [`TensorError::NonFinite`].
pub fn update<T: Real, M: ActorCritic<T>>(
    model: &M,
    store: &mut ParamStore<T>,
    opt: &mut PpoOptimizers<T>,
    rollout: &Rollout<M::Sample>,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats, TensorError> {
    let n = rollout.samples.len();
    if n == 0 {
        return Err(TensorError::Empty("rollout"));
    }
    let mut stats = UpdateStats {
        adv_mean: rollout.advantages.iter().sum::<f64>() / n as f64,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let tape = Tape::<T>::new();
            let batch: Vec<&M::Sample> = chunk.iter().map(|&i| &rollout.samples[i]).collect();
            let (logp, ent, value) = model.evaluate_batch(&tape, store, &batch)?;
            let pick = |v: &[f64]| chunk.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let old = pick(&rollout.logp_old);
            let adv = normalize_advantages(&pick(&rollout.advantages));
            let losses = ppo_losses(&tape, logp, ent, value, &old, &adv, &pick(&rollout.returns), cfg)?;
            let total = tape.value(losses.total).item().as_f64();
            if !total.is_finite() {
                return Err(TensorError::NonFinite { op: "ppo.loss" });
            }
            let ratio = tape.value(losses.ratio).to_f64_vec();
            stats.loss_clip += tape.value(losses.clip).item().as_f64();
            stats.loss_value += tape.value(losses.value).item().as_f64();
            stats.entropy += tape.value(losses.entropy).item().as_f64();
            stats.approx_kl += ratio.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / ratio.len() as f64;
            stats.clip_frac +=
                ratio.iter().filter(|r| (*r - 1.0).abs() > cfg.clip).count() as f64 / ratio.len() as f64;

            let grads = tape.backward(losses.total)?;
            let mut g = grads.params();
            stats.grad_norm += clip_grad_norm(&mut g, cfg.max_grad_norm);
            stats.minibatches += 1;
            let lookup = |id: ParamId| g.iter().find(|(p, _)| *p == id).map(|(_, t)| t);
            if opt.policy.config.lr > 0.0 {
                opt.policy.step(store, lookup)?;
            }
            if opt.value.config.lr > 0.0 {
                opt.value.step(store, lookup)?;
            }
        }
    }
    let m = stats.minibatches as f64;
    for v in [
        &mut stats.loss_clip,
        &mut stats.loss_value,
        &mut stats.entropy,
        &mut stats.approx_kl,
        &mut stats.clip_frac,
        &mut stats.grad_norm,
    ] {
        *v /= m;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests;
