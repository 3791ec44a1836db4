use super::{ParamId, ParamStore, Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// One bias-corrected Adam update in place. `step` is the 1-based count of
/// updates including this one.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    moments: &mut Moments<T>,
    step: u64,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(TensorError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || params.len() != moments.m.len() || params.len() != moments.v.len() {
        return Err(TensorError::Shape(format!(
            "adam: params {} grads {} moments {}/{}",
            params.len(),
            grads.len(),
            moments.m.len(),
            moments.v.len()
        )));
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(step as i32));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for i in 0..params.len() {
        let g = grads[i];
        moments.m[i] = b1 * moments.m[i] + (T::one() - b1) * g;
        moments.v[i] = b2 * moments.v[i] + (T::one() - b2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a fixed subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    moments: Vec<Moments<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, ids: Vec<ParamId>, config: AdamConfig) -> Self {
        let moments = ids.iter().map(|&id| Moments::zeros(store.get(id).len())).collect();
        Self {
            config,
            ids,
            moments,
            step: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grad_of` returns the gradient for a parameter or
    /// `None` if it received none this step (treated as zero).
    pub fn step<'a>(
        &mut self,
        store: &mut ParamStore<T>,
        grad_of: impl Fn(ParamId) -> Option<&'a Tensor<T>>,
    ) -> Result<(), TensorError> {
        self.step += 1;
        for (k, &id) in self.ids.iter().enumerate() {
            let mut values = store.get(id).to_vec();
            let zeros;
            let g: &[T] = match grad_of(id) {
                Some(g) => g.data(),
                None => {
                    zeros = vec![T::zero(); values.len()];
                    &zeros
                }
            };
            adam_step(&mut values, g, &mut self.moments[k], self.step, &self.config)?;
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::new(shape, values)?)?;
        }
        Ok(())
    }
}
