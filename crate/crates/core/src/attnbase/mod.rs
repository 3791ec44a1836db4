//! Plain multi-head self-attention fusion baseline.
//!
//! `H1 = LN(X + O(softmax(QKᵀ/√d_head) V))`, `H2 = LN(H1 + FFN(H1))`,
//! stacked, then the same modality pooling and head as the SSM backbone.
//! No state is carried between control steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Init, LayerNormParams, Linear, Mlp, ParamId, ParamStore, Real, Tape, TensorError, Var};
use crate::ssm::{modality_pool, PoolHead, TokenLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttnConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub head: Vec<usize>,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 2,
            layers: 2,
            ffn: 256,
            head: vec![256, 256],
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm1: LayerNormParams,
    pub ffn: Mlp,
    pub norm2: LayerNormParams,
    pub width: usize,
    pub heads: usize,
}

impl AttnLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &AttnConfig,
        index: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let d = cfg.width;
        if cfg.heads == 0 || d % cfg.heads != 0 {
            return Err(TensorError::Config(format!("{} heads do not divide width {d}", cfg.heads)));
        }
        let name = format!("attn.{index}");
        let lin = |store: &mut ParamStore<T>, rng: &mut _, part: &str| {
            Linear::new(store, &format!("{name}.{part}"), d, d, true, Init::Uniform { gain: 1.0 }, rng)
        };
        let q = lin(store, rng, "q");
        let k = lin(store, rng, "k");
        let v = lin(store, rng, "v");
        let o = lin(store, rng, "o");
        let norm1 = LayerNormParams::new(store, &format!("{name}.norm1"), d);
        let ffn = Mlp::new(store, &format!("{name}.ffn"), &[d, cfg.ffn, d], 1.0, rng);
        let norm2 = LayerNormParams::new(store, &format!("{name}.norm2"), d);
        Ok(Self {
            q,
            k,
            v,
            o,
            norm1,
            ffn,
            norm2,
            width: d,
            heads: cfg.heads,
        })
    }

    /// `[B, L, d] -> [B·heads, L, d_head]`
    fn split<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var, TensorError> {
        let s = tape.shape(x);
        let (b, l, dh) = (s[0], s[1], self.width / self.heads);
        let x = tape.reshape(x, &[b, l, self.heads, dh])?;
        tape.reshape(tape.permute(x, &[0, 2, 1, 3])?, &[b * self.heads, l, dh])
    }

    fn merge<T: Real>(&self, tape: &Tape<T>, x: Var, b: usize) -> Result<Var, TensorError> {
        let s = tape.shape(x);
        let (l, dh) = (s[1], s[2]);
        let x = tape.reshape(x, &[b, self.heads, l, dh])?;
        tape.reshape(tape.permute(x, &[0, 2, 1, 3])?, &[b, l, self.width])
    }

    /// Multi-head attention block without residual; also returns the
    /// attention weights `[B·heads, L, L]`.
    pub fn attend<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var), TensorError> {
        let b = tape.shape(x)[0];
        let dh = self.width / self.heads;
        let q = self.split(tape, self.q.forward(tape, store, x)?)?;
        let k = self.split(tape, self.k.forward(tape, store, x)?)?;
        let v = self.split(tape, self.v.forward(tape, store, x)?)?;
        let scores = tape.scale(tape.bmm(q, tape.permute(k, &[0, 2, 1])?)?, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores)?;
        let mixed = self.merge(tape, tape.bmm(weights, v)?, b)?;
        Ok((self.o.forward(tape, store, mixed)?, weights))
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let (a, _) = self.attend(tape, store, x)?;
        let h1 = self.norm1.forward(tape, store, tape.add(x, a)?)?;
        let f = self.ffn.forward(tape, store, h1)?;
        self.norm2.forward(tape, store, tape.add(h1, f)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for l in [&self.q, &self.k, &self.v, &self.o] {
            p.extend(l.params());
        }
        p.extend(self.norm1.params());
        p.extend(self.ffn.params());
        p.extend(self.norm2.params());
        p
    }
}

#[derive(Debug, Clone)]
pub struct AttnBackbone {
    pub config: AttnConfig,
    pub layers: Vec<AttnLayer>,
    pub head: PoolHead,
}

impl AttnBackbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &AttnConfig, rng: &mut impl Rng) -> Result<Self, TensorError> {
        let layers = (0..config.layers)
            .map(|i| AttnLayer::new(store, config, i, rng))
            .collect::<Result<_, _>>()?;
        let head = PoolHead::new(store, "attn.head", 2 * config.width, &config.head, rng);
        Ok(Self {
            config: config.clone(),
            layers,
            head,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.head.out_width()
    }

    /// `tokens[B, L, d] -> h[B, d_h]`
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        layout: TokenLayout,
    ) -> Result<Var, TensorError> {
        let mut h = tokens;
        for layer in &self.layers {
            h = layer.forward(tape, store, h)?;
        }
        let pooled = modality_pool(tape, h, layout)?;
        self.head.forward(tape, store, pooled)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.layers.iter().flat_map(|l| l.params()).collect();
        p.extend(self.head.mlp.params());
        p
    }
}

/// Multiply-add counts (×2) of one attention layer over `tokens` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnFlops {
    pub projections: u64,
    pub scores: u64,
    pub mix: u64,
    pub ffn: u64,
}

impl AttnFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.mix + self.ffn
    }

    /// The token-mixing terms that grow quadratically.
    pub fn attention(&self) -> u64 {
        self.scores + self.mix
    }
}

pub fn attn_layer_flops(tokens: usize, width: usize, ffn: usize) -> AttnFlops {
    let (l, d, f) = (tokens as u64, width as u64, ffn as u64);
    AttnFlops {
        projections: 2 * 4 * l * d * d,
        scores: 2 * l * l * d,
        mix: 2 * l * l * d,
        ffn: 2 * 2 * l * d * f,
    }
}
