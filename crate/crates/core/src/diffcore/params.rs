use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), TensorError> {
        if value.shape() != self.values[id.0].shape() {
            return Err(TensorError::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
        }
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(-gain/sqrt(fan_in), gain/sqrt(fan_in))`
    Uniform { gain: f64 },
    /// `N(0, std²)`
    Normal { std: f64 },
    Zeros,
}

pub fn init_tensor<T: Real>(shape: &[usize], fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match init {
        Init::Uniform { gain } => {
            let bound = gain / (fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            (0..n).map(|_| T::of(dist.sample(rng))).collect()
        }
        Init::Normal { std } => {
            let dist = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| T::of(dist.sample(rng))).collect()
        }
        Init::Zeros => vec![T::zero(); n],
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Affine map `x[..., in] -> x[..., out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[fan_in, fan_out], fan_in, init, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => tape.add(y, tape.param(store, b)),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Stack of affine layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        final_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { final_gain } else { 2f64.sqrt() };
                Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, Init::Uniform { gain }, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Learned per-feature gain and bias for layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

pub const LAYERNORM_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
            eps: LAYERNORM_EPS,
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        tape.layernorm(x, tape.param(store, self.gain), tape.param(store, self.bias), self.eps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}
