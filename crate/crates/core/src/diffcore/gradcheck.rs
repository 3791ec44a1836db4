//! Central finite-difference checks of tape adjoints (double precision).

use super::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Finite-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradcheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences over every input element.
pub fn gradcheck<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<GradcheckResult, TensorError>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    gradcheck_with(name, inputs, f, None)
}

/// As [`gradcheck`], optionally scaling the adjoint of one op by a factor
/// to confirm the check is sensitive to broken rules.
pub fn gradcheck_with<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: F,
    corrupt: Option<(&'static str, f64)>,
) -> Result<GradcheckResult, TensorError>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let tape = Tape::<f64>::new();
    if let Some((op, factor)) = corrupt {
        tape.corrupt_adjoint(op, factor);
    }
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<_, _>>()?;
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |vals: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let tape = Tape::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect::<Result<_, _>>()?;
        let out = f(&tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut result = GradcheckResult {
        name: name.to_string(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).clone();
        for i in 0..input.len() {
            let mut plus = input.to_vec();
            plus[i] += FD_STEP;
            work[k] = Tensor::new(input.shape().to_vec(), plus)?;
            let fp = eval(&work)?;
            let mut minus = input.to_vec();
            minus[i] -= FD_STEP;
            work[k] = Tensor::new(input.shape().to_vec(), minus)?;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            result.max_rel_err = result.max_rel_err.max(rel_err(a, numeric));
            result.max_abs_err = result.max_abs_err.max((a - numeric).abs());
            result.checked += 1;
        }
        work[k] = input.clone();
    }
    Ok(result)
}

/// Checks gradients with respect to `inputs` and the parameters `ids`
/// of a model that reads its weights from `store`.
pub fn gradcheck_params<F>(
    name: &str,
    store: &ParamStore<f64>,
    ids: &[ParamId],
    inputs: &[Tensor<f64>],
    f: F,
) -> Result<GradcheckResult, TensorError>
where
    F: Fn(&Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let n = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(ids.iter().map(|&id| store.get(id).clone()));
    gradcheck(name, &all, |tape, v| {
        for (k, &id) in ids.iter().enumerate() {
            tape.bind_param(id, v[n + k]);
        }
        f(tape, store, &v[..n])
    })
}
