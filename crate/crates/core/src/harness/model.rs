use rand::Rng;

use super::config::{FusionKind, RunConfig, Variant};
use crate::attnbase::AttnBackbone;
use crate::diffcore::{ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};
use crate::encoders::{Encoders, Observation};
use crate::policy::{ActionSample, Policy};
use crate::ppo::ActorCritic;
use crate::ssm::{batch_states, modality_pool, unbatch_states, Backbone, CarriedState, PoolHead, TokenLayout};

pub enum Fusion {
    Ssm(Backbone),
    Attn(AttnBackbone),
    /// Pooled tokens straight into the head, no token mixing.
    Concat(PoolHead),
}

/// Encoders → fusion → actor-critic. Variants differ only in `fusion`
/// and in which token groups are fed.
pub struct FusionModel {
    pub variant: Variant,
    pub encoders: Encoders,
    pub fusion: Fusion,
    pub policy: Policy,
    pub layout: TokenLayout,
}

/// One stored transition input: what the policy saw, the recurrent state it
/// started from and the pre-squash action it took.
#[derive(Debug, Clone)]
pub struct Sample<T: Real> {
    pub obs: Observation,
    pub state: CarriedState<T>,
    pub a_tilde: Vec<f64>,
}

impl FusionModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &RunConfig, rng: &mut impl Rng) -> Result<Self, TensorError> {
        let variant = cfg.run.variant;
        let encoders = Encoders::new(store, &cfg.encoder, rng)?;
        let layout = encoders.layout(variant.uses_proprio(), variant.uses_vision());
        let fusion = match variant.fusion() {
            FusionKind::Ssm => Fusion::Ssm(Backbone::new(store, &cfg.ssm, rng)),
            FusionKind::Attn => Fusion::Attn(AttnBackbone::new(store, &cfg.attn, rng)?),
            FusionKind::Concat => Fusion::Concat(PoolHead::new(
                store,
                "concat.head",
                2 * cfg.encoder.token_width,
                &cfg.ssm.head,
                rng,
            )),
        };
        let width = match &fusion {
            Fusion::Ssm(b) => b.feature_width(),
            Fusion::Attn(b) => b.feature_width(),
            Fusion::Concat(h) => h.out_width(),
        };
        let policy = Policy::new(store, width, &cfg.policy, rng)?;
        Ok(Self {
            variant,
            encoders,
            fusion,
            policy,
            layout,
        })
    }

    /// Initial recurrent state of a fresh episode (empty when stateless).
    pub fn zero_state<T: Real>(&self) -> CarriedState<T> {
        match &self.fusion {
            Fusion::Ssm(b) => b.zero_state(),
            _ => Vec::new(),
        }
    }

    /// Fused features `[B, d_h]` and the per-stream states after this step.
    pub fn features<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        obs: &[&Observation],
        states: &[&CarriedState<T>],
    ) -> Result<(Var, Vec<CarriedState<T>>), TensorError> {
        let (proprio, depth) = self.encoders.batch::<T>(obs)?;
        let tokens = self.encoders.encode(tape, store, &proprio, &depth, self.layout)?;
        match &self.fusion {
            Fusion::Ssm(b) => {
                let batched = batch_states(states)?;
                let (h, next) = b.forward(tape, store, tokens, self.layout, &batched)?;
                Ok((h, unbatch_states(&next)))
            }
            Fusion::Attn(b) => Ok((b.forward(tape, store, tokens, self.layout)?, vec![Vec::new(); obs.len()])),
            Fusion::Concat(head) => {
                let pooled = modality_pool(tape, tokens, self.layout)?;
                Ok((head.forward(tape, store, pooled)?, vec![Vec::new(); obs.len()]))
            }
        }
    }

    /// Acts for every stream; returns `(sample, value)` pairs and next states.
    #[allow(clippy::type_complexity)]
    pub fn act<T: Real>(
        &self,
        store: &ParamStore<T>,
        obs: &[&Observation],
        states: &[&CarriedState<T>],
        rng: &mut impl Rng,
        deterministic: bool,
    ) -> Result<(Vec<(ActionSample, f64)>, Vec<CarriedState<T>>), TensorError> {
        let tape = Tape::<T>::no_grad();
        let (h, next) = self.features(&tape, store, obs, states)?;
        Ok((self.policy.act(&tape, store, h, rng, deterministic)?, next))
    }

    /// `V` of each stream's current observation.
    pub fn values<T: Real>(
        &self,
        store: &ParamStore<T>,
        obs: &[&Observation],
        states: &[&CarriedState<T>],
    ) -> Result<Vec<f64>, TensorError> {
        let tape = Tape::<T>::no_grad();
        let (h, _) = self.features(&tape, store, obs, states)?;
        Ok(tape.value(self.policy.value(&tape, store, h)?).to_f64_vec())
    }

    pub fn fusion_params(&self) -> Vec<ParamId> {
        match &self.fusion {
            Fusion::Ssm(b) => b.params(),
            Fusion::Attn(b) => b.params(),
            Fusion::Concat(h) => h.mlp.params(),
        }
    }
}

impl<T: Real> ActorCritic<T> for FusionModel {
    type Sample = Sample<T>;

    fn evaluate_batch(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        batch: &[&Sample<T>],
    ) -> Result<(Var, Var, Var), TensorError> {
        let obs: Vec<&Observation> = batch.iter().map(|s| &s.obs).collect();
        let states: Vec<&CarriedState<T>> = batch.iter().map(|s| &s.state).collect();
        let (h, _) = self.features(tape, store, &obs, &states)?;
        let a = self.policy.config.action_dim;
        let acts: Vec<f64> = batch.iter().flat_map(|s| s.a_tilde.iter().copied()).collect();
        let a_tilde = tape.constant(Tensor::from_f64(&[batch.len(), a], &acts)?)?;
        self.policy.evaluate(tape, store, h, a_tilde)
    }

    fn policy_params(&self) -> Vec<ParamId> {
        let mut p = self.encoders.params(self.layout);
        p.extend(self.fusion_params());
        p.extend(self.policy.actor_params());
        p
    }

    fn value_params(&self) -> Vec<ParamId> {
        self.policy.critic_params()
    }
}
