//! Selective state-space fusion backbone.
//!
//! Each layer derives a per-token step size `delta` (per channel) and
//! input/output maps `B`, `C` (per state slot) from the token itself, scans
//! the token stream with a decaying recurrent state, and adds a direct
//! `D ⊙ u` path. Layers are stacked as `H' = LN(Y + H)`. The final layer's
//! outputs are pooled by modality (the proprio token and the mean of the
//! visual tokens) and passed through a small head.

pub mod scan;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    Init, LayerNormParams, Linear, Mlp, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var,
};
pub use scan::{run_scan, scan_parallel, scan_sequential, selective_scan, ScanBackend, ScanInputs, SCAN_BLOCK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsmConfig {
    /// Token width.
    pub width: usize,
    /// State slots per channel.
    pub state: usize,
    pub layers: usize,
    /// Token-dependent `D` from an affine map instead of a static vector.
    pub gated_skip: bool,
    pub backend: ScanBackend,
    /// Hidden widths of the pooling head; the last one is the feature width.
    pub head: Vec<usize>,
    /// Initial step size after the softplus.
    pub init_delta: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            width: 128,
            state: 8,
            layers: 2,
            gated_skip: false,
            backend: ScanBackend::Sequential,
            head: vec![256, 256],
            init_delta: 0.1,
        }
    }
}

/// Carried recurrent state of one layer for one stream: `width × state`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmLayerState<T: Real> {
    pub x: Tensor<T>,
}

impl<T: Real> SsmLayerState<T> {
    pub fn zeros(width: usize, state: usize) -> Self {
        Self {
            x: Tensor::zeros(&[width, state]),
        }
    }
}

/// Per-layer carried states of one stream.
pub type CarriedState<T> = Vec<SsmLayerState<T>>;

#[derive(Debug, Clone)]
pub struct SsmLayer {
    pub index: usize,
    /// `u -> [delta_pre (width) | B (state) | C (state)]`
    pub in_proj: Linear,
    /// `width × state`; the transition is `A = -exp(a_log)`.
    pub a_log: ParamId,
    pub skip: Skip,
    pub norm: LayerNormParams,
    width: usize,
    state: usize,
}

#[derive(Debug, Clone)]
pub enum Skip {
    Static(ParamId),
    Gated(Linear),
}

/// Per-token scan parameters derived from the layer input.
pub struct Selection {
    pub delta: Var,
    pub b: Var,
    pub c: Var,
    pub a: Var,
}

impl SsmLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &SsmConfig, index: usize, rng: &mut impl Rng) -> Self {
        let (w, h) = (cfg.width, cfg.state);
        let name = format!("ssm.{index}");
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), w, w + 2 * h, true, Init::Uniform { gain: 1.0 }, rng);
        // softplus(bias) = init_delta on the delta slice
        let bias = in_proj.bias.expect("in_proj has a bias");
        let mut b = store.get(bias).to_vec();
        let delta_bias = cfg.init_delta.exp_m1().ln();
        b[..w].iter_mut().for_each(|v| *v = T::of(delta_bias));
        store.set(bias, Tensor::new(vec![w + 2 * h], b).expect("shape")).expect("shape");

        // decay rates 1..=h spread evenly per channel
        let a: Vec<T> = (0..w)
            .flat_map(|_| {
                (0..h).map(move |j| {
                    let rate = if h == 1 { 1.0 } else { 1.0 + (h as f64 - 1.0) * j as f64 / (h as f64 - 1.0) };
                    T::of(rate.ln())
                })
            })
            .collect();
        let a_log = store.add(format!("{name}.a_log"), Tensor::new(vec![w, h], a).expect("shape"));
        let skip = if cfg.gated_skip {
            Skip::Gated(Linear::new(store, &format!("{name}.skip"), w, w, true, Init::Uniform { gain: 0.1 }, rng))
        } else {
            Skip::Static(store.add(format!("{name}.skip"), Tensor::full(&[w], T::one())))
        };
        let norm = LayerNormParams::new(store, &format!("{name}.norm"), w);
        Self {
            index,
            in_proj,
            a_log,
            skip,
            norm,
            width: w,
            state: h,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Computes `delta = softplus(.)`, `B`, `C` from `u[B, L, d]` and `A = -exp(a_log)`.
    pub fn select<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, u: Var) -> Result<Selection, TensorError> {
        let (w, h) = (self.width, self.state);
        let proj = self.in_proj.forward(tape, store, u)?;
        let delta = tape.softplus(tape.slice(proj, 2, 0, w)?)?;
        let b = tape.slice(proj, 2, w, w + h)?;
        let c = tape.slice(proj, 2, w + h, w + 2 * h)?;
        let a = tape.neg(tape.exp(tape.param(store, self.a_log))?)?;
        Ok(Selection { delta, b, c, a })
    }

    /// Scan outputs `Y = C·x + D ⊙ u` before the residual, plus final states.
    pub fn scan<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        u: Var,
        x0: Var,
        backend: ScanBackend,
    ) -> Result<(Var, Tensor<T>), TensorError> {
        let sel = self.select(tape, store, u)?;
        let (y, last) = selective_scan(tape, u, sel.delta, sel.a, sel.b, sel.c, x0, backend)?;
        let skip = match &self.skip {
            Skip::Static(d) => tape.mul(u, tape.param(store, *d))?,
            Skip::Gated(lin) => tape.mul(u, lin.forward(tape, store, u)?)?,
        };
        Ok((tape.add(y, skip)?, last))
    }

    /// `LN(Y + H)` and the final states.
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        hidden: Var,
        x0: Var,
        backend: ScanBackend,
    ) -> Result<(Var, Tensor<T>), TensorError> {
        let (y, last) = self.scan(tape, store, hidden, x0, backend)?;
        let out = self.norm.forward(tape, store, tape.add(y, hidden)?)?;
        Ok((out, last))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.in_proj.params();
        p.push(self.a_log);
        match &self.skip {
            Skip::Static(d) => p.push(*d),
            Skip::Gated(l) => p.extend(l.params()),
        }
        p.extend(self.norm.params());
        p
    }
}

/// Evaluates one layer's scan on a single unbatched token matrix
/// `tokens[L, d]`, starting from `state`.
pub fn layer_scan<T: Real>(
    layer: &SsmLayer,
    store: &ParamStore<T>,
    tokens: &Tensor<T>,
    state: &SsmLayerState<T>,
    backend: ScanBackend,
) -> Result<(Tensor<T>, SsmLayerState<T>), TensorError> {
    let tape = Tape::no_grad();
    let (l, d) = match tokens.shape() {
        [l, d] => (*l, *d),
        s => return Err(TensorError::Shape(format!("expected [L, d] tokens, got {s:?}"))),
    };
    if state.x.shape() != [layer.width, layer.state] || d != layer.width {
        return Err(TensorError::Shape(format!(
            "state {:?} / width {d} for layer of width {} and state {}",
            state.x.shape(),
            layer.width,
            layer.state
        )));
    }
    let u = tape.constant(tokens.reshape(&[1, l, d])?)?;
    let x0 = tape.constant(state.x.reshape(&[1, layer.width, layer.state])?)?;
    let (y, last) = layer.scan(&tape, store, u, x0, backend)?;
    Ok((
        tape.value(y).reshape(&[l, d])?,
        SsmLayerState {
            x: last.reshape(&[layer.width, layer.state])?,
        },
    ))
}

/// Which token groups are present in a sequence: the proprio token first,
/// then `n_visual` visual tokens in raster order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub has_proprio: bool,
    pub n_visual: usize,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.has_proprio as usize + self.n_visual
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `h = head([y_prop ; mean(y_vis)])`; a missing group contributes zeros.
pub fn modality_pool<T: Real>(tape: &Tape<T>, tokens: Var, layout: TokenLayout) -> Result<Var, TensorError> {
    let shape = tape.shape(tokens);
    let (batch, width) = (shape[0], shape[2]);
    let zeros = || tape.constant(Tensor::zeros(&[batch, width]));
    let prop = if layout.has_proprio {
        tape.reshape(tape.slice(tokens, 1, 0, 1)?, &[batch, width])?
    } else {
        zeros()?
    };
    let vis = if layout.n_visual > 0 {
        let start = layout.has_proprio as usize;
        tape.mean(tape.slice(tokens, 1, start, start + layout.n_visual)?, 1)?
    } else {
        zeros()?
    };
    tape.concat(&[prop, vis], 1)
}

/// Feature head shared by every fusion variant: ReLU after each layer.
#[derive(Debug, Clone)]
pub struct PoolHead {
    pub mlp: Mlp,
}

impl PoolHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, input: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut all = vec![input];
        all.extend_from_slice(widths);
        Self {
            mlp: Mlp::new(store, name, &all, 2f64.sqrt(), rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, pooled: Var) -> Result<Var, TensorError> {
        tape.relu(self.mlp.forward(tape, store, pooled)?)
    }

    pub fn out_width(&self) -> usize {
        self.mlp.out_width()
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: SsmConfig,
    pub layers: Vec<SsmLayer>,
    pub head: PoolHead,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &SsmConfig, rng: &mut impl Rng) -> Self {
        let layers = (0..config.layers).map(|i| SsmLayer::new(store, config, i, rng)).collect();
        let head = PoolHead::new(store, "ssm.head", 2 * config.width, &config.head, rng);
        Self {
            config: config.clone(),
            layers,
            head,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.head.out_width()
    }

    pub fn zero_state<T: Real>(&self) -> CarriedState<T> {
        self.layers
            .iter()
            .map(|_| SsmLayerState::zeros(self.config.width, self.config.state))
            .collect()
    }

    /// Runs the stacked layers over `tokens[B, L, d]` starting from the
    /// per-layer batched states `[B, d, h]`, then pools and applies the head.
    /// Returns the fused feature `[B, d_h]` and the new batched states.
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        layout: TokenLayout,
        states: &[Tensor<T>],
    ) -> Result<(Var, Vec<Tensor<T>>), TensorError> {
        if states.len() != self.layers.len() {
            return Err(TensorError::Shape(format!(
                "{} carried states for {} layers",
                states.len(),
                self.layers.len()
            )));
        }
        let mut hidden = tokens;
        let mut new_states = Vec::with_capacity(states.len());
        for (layer, st) in self.layers.iter().zip(states) {
            let x0 = tape.constant(st.clone())?;
            let (out, last) = layer.forward(tape, store, hidden, x0, self.config.backend)?;
            hidden = out;
            new_states.push(last);
        }
        let pooled = modality_pool(tape, hidden, layout)?;
        Ok((self.head.forward(tape, store, pooled)?, new_states))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.layers.iter().flat_map(|l| l.params()).collect();
        p.extend(self.head.mlp.params());
        p
    }
}

/// Stacks per-stream carried states into per-layer batched tensors.
pub fn batch_states<T: Real>(streams: &[&CarriedState<T>]) -> Result<Vec<Tensor<T>>, TensorError> {
    let layers = streams.first().map(|s| s.len()).unwrap_or(0);
    (0..layers)
        .map(|l| Tensor::stack(&streams.iter().map(|s| s[l].x.clone()).collect::<Vec<_>>()))
        .collect()
}

/// Inverse of [`batch_states`].
pub fn unbatch_states<T: Real>(batched: &[Tensor<T>]) -> Vec<CarriedState<T>> {
    let per_layer: Vec<Vec<Tensor<T>>> = batched.iter().map(|t| t.unstack()).collect();
    let streams = per_layer.first().map(|v| v.len()).unwrap_or(0);
    (0..streams)
        .map(|s| per_layer.iter().map(|l| SsmLayerState { x: l[s].clone() }).collect())
        .collect()
}
