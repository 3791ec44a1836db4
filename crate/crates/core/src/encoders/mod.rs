//! Observation → normalized cross-modal token sequence.
//!
//! The proprio vector goes through an MLP to one token; the depth stack is
//! cut into `P × P` patches (frames as input channels), embedded by a
//! stride-`P` convolution and a linear map. Both are projected to the token
//! width, summed with positional and modality codes and layer-normalized.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    init_tensor, kernels, Init, LayerNormParams, Linear, Mlp, ParamId, ParamStore, Real, Tape, Tensor, TensorError,
    Var,
};
use crate::ssm::TokenLayout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub proprio_dim: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Common token width `d`.
    pub token_width: usize,
    pub proprio_hidden: Vec<usize>,
    /// Proprio embedding width `d_p`.
    pub proprio_embed: usize,
    /// Visual embedding width `d_v`.
    pub visual_embed: usize,
    pub max_range: f64,
    /// Learned per-frame code added to the patch pixels.
    pub temporal_pos: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            proprio_dim: 93,
            frames: 4,
            height: 64,
            width: 64,
            patch: 8,
            token_width: 128,
            proprio_hidden: vec![256, 256],
            proprio_embed: 128,
            visual_embed: 128,
            max_range: 5.0,
            temporal_pos: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(TensorError::Config(format!(
                "depth {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.frames == 0 || self.proprio_dim == 0 || self.token_width < 2 {
            return Err(TensorError::Config("frames, proprio_dim and token_width must be positive".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(TensorError::Config("max_range must be positive".into()));
        }
        Ok(())
    }

    pub fn n_visual(&self) -> usize {
        visual_token_count(self.height, self.width, self.patch).unwrap_or(0)
    }

    pub fn depth_len(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// `(H/P)·(W/P)`; an error when either side is not divisible.
pub fn visual_token_count(height: usize, width: usize, patch: usize) -> Result<usize, TensorError> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(TensorError::Shape(format!("{height}x{width} not divisible by patch {patch}")));
    }
    Ok((height / patch) * (width / patch))
}

/// One raw observation: proprio readings and a stack of depth frames
/// (`frames × height × width`, oldest first, metres).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub proprio: Vec<f32>,
    pub depth: Vec<f32>,
}

/// Rearranges `depth[B, F, H, W]` into patch vectors `[B, N, F·P·P]`,
/// raster order over patches, frame-major inside each patch.
pub fn patchify<T: Real>(depth: &Tensor<T>, patch: usize) -> Result<Tensor<T>, TensorError> {
    let [b, f, h, w] = depth.shape() else {
        return Err(TensorError::Shape(format!("expected [B, F, H, W], got {:?}", depth.shape())));
    };
    let (b, f, h, w) = (*b, *f, *h, *w);
    let n = visual_token_count(h, w, patch)?;
    let (hp, wp) = (h / patch, w / patch);
    let (data, _) = kernels::permute(depth.data(), &[b, f, hp, patch, wp, patch], &[0, 2, 4, 1, 3, 5]);
    Tensor::new(vec![b, n, f * patch * patch], data)
}

/// Sets `K ~ U{3..=30}` distinct pixels of one frame to `max_range`.
/// Returns the perturbed frame and the chosen pixel indices.
pub fn perturb_depth(depth: &[f32], max_range: f32, rng: &mut impl Rng) -> (Vec<f32>, Vec<usize>) {
    let k = rng.random_range(3..=30usize).min(depth.len());
    let picked = index::sample(rng, depth.len(), k).into_vec();
    let mut out = depth.to_vec();
    for &i in &picked {
        out[i] = max_range;
    }
    (out, picked)
}

#[derive(Debug, Clone)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub proprio: Mlp,
    /// Stride-`P` convolution written as a linear map on patch vectors.
    pub conv: Linear,
    pub visual: Linear,
    pub w_p: Linear,
    pub w_v: Linear,
    /// `(1+N) × d`
    pub pos: ParamId,
    /// Row 0 tags the proprio token, row 1 every visual token.
    pub modality: ParamId,
    pub time: Option<ParamId>,
    pub norm: LayerNormParams,
}

impl Encoders {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self, TensorError> {
        config.validate()?;
        let c = config;
        let n = c.n_visual();
        let mut widths = vec![c.proprio_dim];
        widths.extend_from_slice(&c.proprio_hidden);
        widths.push(c.proprio_embed);
        let proprio = Mlp::new(store, "enc.proprio", &widths, 1.0, rng);
        let patch_len = c.frames * c.patch * c.patch;
        let conv = Linear::new(store, "enc.conv", patch_len, c.visual_embed, true, Init::Uniform { gain: 2f64.sqrt() }, rng);
        let visual = Linear::new(store, "enc.visual", c.visual_embed, c.visual_embed, true, Init::Uniform { gain: 1.0 }, rng);
        let w_p = Linear::new(store, "enc.w_p", c.proprio_embed, c.token_width, false, Init::Uniform { gain: 1.0 }, rng);
        let w_v = Linear::new(store, "enc.w_v", c.visual_embed, c.token_width, false, Init::Uniform { gain: 1.0 }, rng);
        let code = Init::Normal { std: 0.02 };
        let pos = store.add("enc.pos", init_tensor(&[1 + n, c.token_width], 1, code, rng));
        let modality = store.add("enc.modality", init_tensor(&[2, c.token_width], 1, code, rng));
        let time = c
            .temporal_pos
            .then(|| store.add("enc.time", init_tensor(&[c.frames, c.patch * c.patch], 1, code, rng)));
        let norm = LayerNormParams::new(store, "enc.norm", c.token_width);
        Ok(Self {
            config: c.clone(),
            proprio,
            conv,
            visual,
            w_p,
            w_v,
            pos,
            modality,
            time,
            norm,
        })
    }

    /// Packs observations into `proprio[B, D_p]` and `depth[B, F, H, W]`.
    pub fn batch<T: Real>(&self, obs: &[&Observation]) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
        let c = &self.config;
        let mut prop = Vec::with_capacity(obs.len() * c.proprio_dim);
        let mut depth = Vec::with_capacity(obs.len() * c.depth_len());
        for o in obs {
            if o.proprio.len() != c.proprio_dim || o.depth.len() != c.depth_len() {
                return Err(TensorError::Shape(format!(
                    "observation with {} proprio / {} depth values, expected {} / {}",
                    o.proprio.len(),
                    o.depth.len(),
                    c.proprio_dim,
                    c.depth_len()
                )));
            }
            prop.extend(o.proprio.iter().map(|&v| T::of(v as f64)));
            depth.extend(o.depth.iter().map(|&v| T::of(v.clamp(0.0, c.max_range as f32) as f64)));
        }
        Ok((
            Tensor::new(vec![obs.len(), c.proprio_dim], prop)?,
            Tensor::new(vec![obs.len(), c.frames, c.height, c.width], depth)?,
        ))
    }

    /// `z_prop[B, d_p]`
    pub fn encode_proprio<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, proprio: Var) -> Result<Var, TensorError> {
        let s = tape.shape(proprio);
        if s.last() != Some(&self.config.proprio_dim) {
            return Err(TensorError::Shape(format!(
                "proprio {:?}, expected last dim {}",
                s, self.config.proprio_dim
            )));
        }
        self.proprio.forward(tape, store, proprio)
    }

    /// `z_vis[B, N, d_v]` from raw depth (metres).
    pub fn encode_depth<T: Real>(&self, tape: &Tape<T>, store: &ParamStore<T>, depth: &Tensor<T>) -> Result<Var, TensorError> {
        let c = &self.config;
        if depth.shape()[1..] != [c.frames, c.height, c.width] {
            return Err(TensorError::Shape(format!(
                "depth {:?}, expected [B, {}, {}, {}]",
                depth.shape(),
                c.frames,
                c.height,
                c.width
            )));
        }
        let scale = 1.0 / c.max_range;
        let patches = patchify(&depth.map(|v| v * T::of(scale)), c.patch)?;
        let mut x = tape.constant(patches)?;
        if let Some(t) = self.time {
            let code = tape.reshape(tape.param(store, t), &[c.frames * c.patch * c.patch])?;
            x = tape.add(x, code)?;
        }
        let h = tape.relu(self.conv.forward(tape, store, x)?)?;
        self.visual.forward(tape, store, h)
    }

    /// `Û = LN(U + E_pos + E_mod)` for the token groups in `layout`
    /// (proprio token first). `z_prop` is `[B, d_p]`, `z_vis` `[B, N, d_v]`.
    pub fn assemble<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        z_prop: Option<Var>,
        z_vis: Option<Var>,
    ) -> Result<Var, TensorError> {
        let d = self.config.token_width;
        let n = self.config.n_visual();
        let pos = tape.param(store, self.pos);
        let modality = tape.param(store, self.modality);
        let mut parts = Vec::new();
        if let Some(zp) = z_prop {
            let b = tape.shape(zp)[0];
            let u = tape.reshape(self.w_p.forward(tape, store, zp)?, &[b, 1, d])?;
            let code = tape.add(tape.slice(pos, 0, 0, 1)?, tape.slice(modality, 0, 0, 1)?)?;
            parts.push(tape.add(u, code)?);
        }
        if let Some(zv) = z_vis {
            if tape.shape(zv)[1] != n {
                return Err(TensorError::Shape(format!("{} visual tokens, tables hold {n}", tape.shape(zv)[1])));
            }
            let u = self.w_v.forward(tape, store, zv)?;
            let code = tape.add(tape.slice(pos, 0, 1, 1 + n)?, tape.slice(modality, 0, 1, 2)?)?;
            parts.push(tape.add(u, code)?);
        }
        if parts.is_empty() {
            return Err(TensorError::Empty("token sequence without any modality"));
        }
        let u = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? };
        self.norm.forward(tape, store, u)
    }

    /// Full encoding of a batch into `[B, len(layout), d]`.
    pub fn encode<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        proprio: &Tensor<T>,
        depth: &Tensor<T>,
        layout: TokenLayout,
    ) -> Result<Var, TensorError> {
        let zp = if layout.has_proprio {
            Some(self.encode_proprio(tape, store, tape.constant(proprio.clone())?)?)
        } else {
            None
        };
        let zv = if layout.n_visual > 0 {
            Some(self.encode_depth(tape, store, depth)?)
        } else {
            None
        };
        self.assemble(tape, store, zp, zv)
    }

    pub fn layout(&self, proprio: bool, vision: bool) -> TokenLayout {
        TokenLayout {
            has_proprio: proprio,
            n_visual: if vision { self.config.n_visual() } else { 0 },
        }
    }

    pub fn params(&self, layout: TokenLayout) -> Vec<ParamId> {
        let mut p = Vec::new();
        if layout.has_proprio {
            p.extend(self.proprio.params());
            p.extend(self.w_p.params());
        }
        if layout.n_visual > 0 {
            p.extend(self.conv.params());
            p.extend(self.visual.params());
            p.extend(self.w_v.params());
            p.extend(self.time);
        }
        p.extend([self.pos, self.modality]);
        p.extend(self.norm.params());
        p
    }
}

#[cfg(test)]
mod tests;
