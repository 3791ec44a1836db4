//! Squashed-Gaussian actor and value critic over the fused feature.
//!
//! `ã ~ N(μ(h), diag σ(h)²)`, `a = a_max · tanh(ã)`. Likelihoods and
//! entropies are taken on `ã`; the tanh Jacobian cancels in ratios.

use std::f64::consts::{E, PI};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mlp, ParamId, ParamStore, Real, Tape, TensorError, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    /// Per-dimension bound; a single entry applies to every dimension.
    pub a_max: Vec<f64>,
    /// Added to the log-σ output at initialization.
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            action_dim: 3,
            hidden: vec![256, 256],
            a_max: vec![1.0],
            init_log_std: -0.5,
        }
    }
}

impl PolicyConfig {
    pub fn bounds(&self) -> Result<Vec<f64>, TensorError> {
        let b = match self.a_max.len() {
            1 => vec![self.a_max[0]; self.action_dim],
            n if n == self.action_dim => self.a_max.clone(),
            n => {
                return Err(TensorError::Config(format!(
                    "{n} action bounds for {} action dims",
                    self.action_dim
                )))
            }
        };
        if b.iter().any(|&v| !(v > 0.0)) {
            return Err(TensorError::Config("action bounds must be positive".into()));
        }
        Ok(b)
    }
}

/// One stochastic (or mean) action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub a_tilde: Vec<f64>,
    pub action: Vec<f64>,
    pub logp: f64,
}

/// `a_max · tanh(x)`, kept strictly inside the bound.
pub fn squash(x: f64, a_max: f64) -> f64 {
    let t = x.tanh().clamp(-1.0 + f64::EPSILON, 1.0 - f64::EPSILON);
    a_max * t
}

/// Diagonal-Gaussian log-density.
pub fn gaussian_logp(mu: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    mu.iter()
        .zip(log_std)
        .zip(x)
        .map(|((&m, &s), &v)| {
            let z = (v - m) / s.exp();
            -0.5 * z * z - s - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// `Σ (½ ln(2πe) + ln σ_i)`
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|s| 0.5 * (2.0 * PI * E).ln() + s).sum()
}

/// Samples (or takes the mean of) one action distribution.
pub fn sample_action(
    mu: &[f64],
    log_std: &[f64],
    a_max: &[f64],
    rng: &mut impl Rng,
    deterministic: bool,
) -> Result<ActionSample, TensorError> {
    if mu.iter().chain(log_std).any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "policy.act" });
    }
    let a_tilde: Vec<f64> = if deterministic {
        mu.to_vec()
    } else {
        mu.iter()
            .zip(log_std)
            .map(|(&m, &s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s.exp() * z
            })
            .collect()
    };
    let action = a_tilde.iter().zip(a_max).map(|(&x, &b)| squash(x, b)).collect();
    let logp = gaussian_logp(mu, log_std, &a_tilde);
    Ok(ActionSample { a_tilde, action, logp })
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub bounds: Vec<f64>,
    /// `h -> [μ ; log σ]`
    pub actor: Mlp,
    pub critic: Mlp,
}

/// Distribution parameters of a batch: `μ`, clamped `log σ` (both `[B, A]`).
pub struct DistVars {
    pub mu: Var,
    pub log_std: Var,
}

impl Policy {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        feature_width: usize,
        config: &PolicyConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let bounds = config.bounds()?;
        let a = config.action_dim;
        let mut widths = vec![feature_width];
        widths.extend_from_slice(&config.hidden);
        let mut aw = widths.clone();
        aw.push(2 * a);
        let actor = Mlp::new(store, "policy.actor", &aw, 0.01, rng);
        let last_bias = actor.layers.last().and_then(|l| l.bias).expect("actor bias");
        let mut b = store.get(last_bias).to_vec();
        b[a..].iter_mut().for_each(|v| *v = T::of(config.init_log_std));
        store.set(last_bias, crate::diffcore::Tensor::vector(b))?;
        let mut cw = widths;
        cw.push(1);
        let critic = Mlp::new(store, "policy.critic", &cw, 1.0, rng);
        Ok(Self {
            config: config.clone(),
            bounds,
            actor,
            critic,
        })
    }

    pub fn dist<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, h: Var) -> Result<DistVars, TensorError> {
        let a = self.config.action_dim;
        let out = self.actor.forward(tape, store, h)?;
        let mu = tape.slice(out, 1, 0, a)?;
        let log_std = tape.clamp(tape.slice(out, 1, a, 2 * a)?, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(DistVars { mu, log_std })
    }

    /// `V(h)` as `[B]`.
    pub fn value<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var, TensorError> {
        let v = self.critic.forward(tape, store, h)?;
        let b = tape.shape(v)[0];
        tape.reshape(v, &[b])
    }

    /// Per-row log-density of `a_tilde[B, A]` and entropy, both `[B]`.
    pub fn log_prob_entropy<T: Real>(
        &self,
        tape: &Tape<T>,
        dist: &DistVars,
        a_tilde: Var,
    ) -> Result<(Var, Var), TensorError> {
        let a = self.config.action_dim;
        if tape.shape(a_tilde) != tape.shape(dist.mu) {
            return Err(TensorError::Shape(format!(
                "stored actions {:?} vs distribution {:?}",
                tape.shape(a_tilde),
                tape.shape(dist.mu)
            )));
        }
        let z = tape.mul(tape.sub(a_tilde, dist.mu)?, tape.exp(tape.neg(dist.log_std)?)?)?;
        let quad = tape.scale(tape.sum(tape.square(z)?, 1)?, -0.5)?;
        let log_det = tape.sum(dist.log_std, 1)?;
        let logp = tape.add_scalar(tape.sub(quad, log_det)?, -0.5 * a as f64 * (2.0 * PI).ln())?;
        let entropy = tape.add_scalar(log_det, 0.5 * a as f64 * (2.0 * PI * E).ln())?;
        Ok((logp, entropy))
    }

    /// `(logp, entropy, value)` of stored pre-squash actions.
    pub fn evaluate<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        a_tilde: Var,
    ) -> Result<(Var, Var, Var), TensorError> {
        let dist = self.dist(tape, store, h)?;
        let (logp, ent) = self.log_prob_entropy(tape, &dist, a_tilde)?;
        Ok((logp, ent, self.value(tape, store, h)?))
    }

    /// Samples one action per row of `h[B, d_h]`; also returns `V(h)`.
    pub fn act<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        rng: &mut impl Rng,
        deterministic: bool,
    ) -> Result<Vec<(ActionSample, f64)>, TensorError> {
        let a = self.config.action_dim;
        let dist = self.dist(tape, store, h)?;
        let mu = tape.value(dist.mu).to_f64_vec();
        let ls = tape.value(dist.log_std).to_f64_vec();
        let v = tape.value(self.value(tape, store, h)?).to_f64_vec();
        (0..v.len())
            .map(|i| {
                let s = sample_action(&mu[i * a..(i + 1) * a], &ls[i * a..(i + 1) * a], &self.bounds, rng, deterministic)?;
                Ok((s, v[i]))
            })
            .collect()
    }

    pub fn actor_params(&self) -> Vec<ParamId> {
        self.actor.params()
    }

    pub fn critic_params(&self) -> Vec<ParamId> {
        self.critic.params()
    }
}
