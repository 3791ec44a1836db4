//! Finite-difference checks of every differentiable piece, double precision.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attnbase::{AttnBackbone, AttnConfig};
use crate::diffcore::gradcheck::{gradcheck, gradcheck_params, gradcheck_with, GradcheckResult};
use crate::diffcore::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::encoders::{EncoderConfig, Encoders};
use crate::policy::{Policy, PolicyConfig};
use crate::ppo::{ppo_losses, PpoConfig};
use crate::ssm::{selective_scan, Backbone, ScanBackend, SsmConfig};

/// Tolerance for single operations.
pub const OP_TOL: f64 = 1e-6;
/// Tolerance for composite modules and the full pipeline.
pub const PIPELINE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Ops,
    Modules,
    Pipeline,
    Mutation,
    All,
}

impl FromStr for Component {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ops" => Component::Ops,
            "modules" => Component::Modules,
            "pipeline" => Component::Pipeline,
            "mutation" => Component::Mutation,
            "all" => Component::All,
            _ => return Err(HarnessError::Config(format!("unknown gradcheck component {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub group: String,
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradRow {
    fn from(group: &str, r: GradcheckResult, tol: f64) -> Self {
        Self {
            group: group.to_string(),
            passed: r.passes(tol),
            name: r.name,
            max_rel_err: r.max_rel_err,
            max_abs_err: r.max_abs_err,
            checked: r.checked,
            tol,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<10} {:<28} {:>12} {:>12} {:>8} {:>8}  status\n", "group", "check", "max_rel", "max_abs", "points", "tol");
        for r in &self.rows {
            s += &format!(
                "{:<10} {:<28} {:>12.3e} {:>12.3e} {:>8} {:>8.0e}  {}\n",
                r.group,
                r.name,
                r.max_rel_err,
                r.max_abs_err,
                r.checked,
                r.tol,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>()).expect("shape")
}

/// Magnitudes in `[lo, hi]` with random sign, keeping values off kinks.
fn rand_signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_f64(shape, &v).expect("shape")
}

/// `Σ out ⊙ W` with a fixed random weight, so every output element matters.
fn weighted(tape: &Tape<f64>, out: Var, w: &Tensor<f64>) -> Result<Var, TensorError> {
    let wv = tape.constant(w.clone())?;
    tape.sum_all(tape.mul(out, wv)?)
}

type OpFn = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    let mut unary = |name: &'static str, input: Tensor<f64>, w: Tensor<f64>, f: fn(&Tape<f64>, Var) -> Result<Var, TensorError>| {
        cases.push((name, vec![input], Box::new(move |t: &Tape<f64>, v: &[Var]| weighted(t, f(t, v[0])?, &w))));
    };
    let s = [3, 4];
    unary("exp", rand_t(rng, &s, -1.0, 1.0), rand_t(rng, &s, -1.0, 1.0), |t, x| t.exp(x));
    unary("tanh", rand_t(rng, &s, -2.0, 2.0), rand_t(rng, &s, -1.0, 1.0), |t, x| t.tanh(x));
    unary("softplus", rand_t(rng, &s, -3.0, 3.0), rand_t(rng, &s, -1.0, 1.0), |t, x| t.softplus(x));
    unary("sigmoid", rand_t(rng, &s, -3.0, 3.0), rand_t(rng, &s, -1.0, 1.0), |t, x| t.sigmoid(x));
    unary("relu", rand_signed(rng, &s, 0.1, 2.0), rand_t(rng, &s, -1.0, 1.0), |t, x| t.relu(x));
    unary("neg", rand_t(rng, &s, -1.0, 1.0), rand_t(rng, &s, -1.0, 1.0), |t, x| t.neg(x));
    unary("square", rand_t(rng, &s, -1.0, 1.0), rand_t(rng, &s, -1.0, 1.0), |t, x| t.square(x));
    unary("scale", rand_t(rng, &s, -1.0, 1.0), rand_t(rng, &s, -1.0, 1.0), |t, x| t.scale(x, -1.7));
    unary("add_scalar", rand_t(rng, &s, -1.0, 1.0), rand_t(rng, &s, -1.0, 1.0), |t, x| t.add_scalar(x, 0.3));
    unary("clamp", rand_signed(rng, &s, 0.05, 0.45), rand_t(rng, &s, -1.0, 1.0), |t, x| {
        t.clamp(t.scale(x, 4.0)?, -1.0, 1.0)
    });
    unary("softmax", rand_t(rng, &[2, 3, 5], -2.0, 2.0), rand_t(rng, &[2, 3, 5], -1.0, 1.0), |t, x| t.softmax(x));
    unary("sum(axis)", rand_t(rng, &[2, 3, 4], -1.0, 1.0), rand_t(rng, &[2, 4], -1.0, 1.0), |t, x| t.sum(x, 1));
    unary("mean(axis)", rand_t(rng, &[2, 3, 4], -1.0, 1.0), rand_t(rng, &[2, 3], -1.0, 1.0), |t, x| t.mean(x, 2));
    unary("sum_all", rand_t(rng, &s, -1.0, 1.0), Tensor::scalar(1.3), |t, x| t.sum_all(x));
    unary("mean_all", rand_t(rng, &s, -1.0, 1.0), Tensor::scalar(-0.7), |t, x| t.mean_all(x));
    unary("slice", rand_t(rng, &[2, 5, 3], -1.0, 1.0), rand_t(rng, &[2, 2, 3], -1.0, 1.0), |t, x| t.slice(x, 1, 1, 3));
    unary("reshape", rand_t(rng, &[2, 6], -1.0, 1.0), rand_t(rng, &[3, 4], -1.0, 1.0), |t, x| t.reshape(x, &[3, 4]));
    unary("permute", rand_t(rng, &[2, 3, 4], -1.0, 1.0), rand_t(rng, &[4, 2, 3], -1.0, 1.0), |t, x| {
        t.permute(x, &[2, 0, 1])
    });

    let mut binary = |name: &'static str, a: Tensor<f64>, b: Tensor<f64>, w: Tensor<f64>, f: fn(&Tape<f64>, Var, Var) -> Result<Var, TensorError>| {
        cases.push((name, vec![a, b], Box::new(move |t: &Tape<f64>, v: &[Var]| weighted(t, f(t, v[0], v[1])?, &w))));
    };
    binary("add(broadcast)", rand_t(rng, &[2, 3, 4], -1.0, 1.0), rand_t(rng, &[4], -1.0, 1.0), rand_t(rng, &[2, 3, 4], -1.0, 1.0), |t, a, b| t.add(a, b));
    binary("sub(broadcast)", rand_t(rng, &[2, 1, 4], -1.0, 1.0), rand_t(rng, &[3, 1], -1.0, 1.0), rand_t(rng, &[2, 3, 4], -1.0, 1.0), |t, a, b| t.sub(a, b));
    binary("mul(broadcast)", rand_t(rng, &[2, 3, 4], -1.0, 1.0), rand_t(rng, &[3, 4], -1.0, 1.0), rand_t(rng, &[2, 3, 4], -1.0, 1.0), |t, a, b| t.mul(a, b));
    let a = rand_t(rng, &[3, 4], -1.0, 1.0);
    let gap = rand_signed(rng, &[3, 4], 0.05, 0.5);
    let b = Tensor::new(vec![3, 4], a.data().iter().zip(gap.data()).map(|(x, g)| x + g).collect()).expect("shape");
    binary("minimum", a, b, rand_t(rng, &[3, 4], -1.0, 1.0), |t, a, b| t.minimum(a, b));
    binary("matmul", rand_t(rng, &[2, 3, 4], -1.0, 1.0), rand_t(rng, &[4, 5], -1.0, 1.0), rand_t(rng, &[2, 3, 5], -1.0, 1.0), |t, a, b| t.matmul(a, b));
    binary("bmm", rand_t(rng, &[2, 3, 4], -1.0, 1.0), rand_t(rng, &[2, 4, 2], -1.0, 1.0), rand_t(rng, &[2, 3, 2], -1.0, 1.0), |t, a, b| t.bmm(a, b));
    binary("concat", rand_t(rng, &[2, 1, 3], -1.0, 1.0), rand_t(rng, &[2, 4, 3], -1.0, 1.0), rand_t(rng, &[2, 5, 3], -1.0, 1.0), |t, a, b| t.concat(&[a, b], 1));

    let w = rand_t(rng, &[2, 3, 5], -1.0, 1.0);
    cases.push((
        "layernorm",
        vec![rand_t(rng, &[2, 3, 5], -1.0, 1.0), rand_t(rng, &[5], 0.5, 1.5), rand_t(rng, &[5], -0.5, 0.5)],
        Box::new(move |t, v| weighted(t, t.layernorm(v[0], v[1], v[2], 1e-5)?, &w)),
    ));
    for (name, backend) in [("selective_scan(seq)", ScanBackend::Sequential), ("selective_scan(par)", ScanBackend::Parallel)] {
        let (b, n, d, h) = (2, 5, 3, 2);
        let w = rand_t(rng, &[b, n, d], -1.0, 1.0);
        cases.push((
            name,
            vec![
                rand_t(rng, &[b, n, d], -1.0, 1.0),
                rand_t(rng, &[b, n, d], 0.05, 0.6),
                rand_t(rng, &[d, h], -2.0, -0.2),
                rand_t(rng, &[b, n, h], -1.0, 1.0),
                rand_t(rng, &[b, n, h], -1.0, 1.0),
                rand_t(rng, &[b, d, h], -1.0, 1.0),
            ],
            Box::new(move |t, v| {
                let (y, _) = selective_scan(t, v[0], v[1], v[2], v[3], v[4], v[5], backend)?;
                weighted(t, y, &w)
            }),
        ));
    }
    // a long scan exercises the tree path of the parallel backend
    let (b, n, d, h) = (1, 70, 2, 2);
    let w = rand_t(rng, &[b, n, d], -1.0, 1.0);
    cases.push((
        "selective_scan(par,70)",
        vec![
            rand_t(rng, &[b, n, d], -1.0, 1.0),
            rand_t(rng, &[b, n, d], 0.05, 0.6),
            rand_t(rng, &[d, h], -2.0, -0.2),
            rand_t(rng, &[b, n, h], -1.0, 1.0),
            rand_t(rng, &[b, n, h], -1.0, 1.0),
            rand_t(rng, &[b, d, h], -1.0, 1.0),
        ],
        Box::new(move |t, v| {
            let (y, _) = selective_scan(t, v[0], v[1], v[2], v[3], v[4], v[5], ScanBackend::Parallel)?;
            weighted(t, y, &w)
        }),
    ));
    cases
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        proprio_dim: 5,
        frames: 2,
        height: 4,
        width: 4,
        patch: 2,
        token_width: 6,
        proprio_hidden: vec![5],
        proprio_embed: 4,
        visual_embed: 4,
        max_range: 5.0,
        temporal_pos: true,
    }
}

fn tiny_ssm() -> SsmConfig {
    SsmConfig {
        width: 6,
        state: 3,
        layers: 2,
        head: vec![5, 4],
        ..SsmConfig::default()
    }
}

/// Encoders → SSM backbone (non-zero carried state) → scalar.
pub fn pipeline_check(seed: u64) -> Result<GradcheckResult, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let enc_cfg = tiny_encoder();
    let enc = Encoders::new(&mut store, &enc_cfg, &mut rng)?;
    let bb = Backbone::new(&mut store, &tiny_ssm(), &mut rng);
    let layout = enc.layout(true, true);
    let batch = 2;
    let proprio = rand_t(&mut rng, &[batch, enc_cfg.proprio_dim], -1.0, 1.0);
    let depth = rand_t(&mut rng, &[batch, enc_cfg.frames, enc_cfg.height, enc_cfg.width], 0.0, 5.0);
    let states: Vec<Tensor<f64>> = (0..2).map(|_| rand_t(&mut rng, &[batch, 6, 3], -0.5, 0.5)).collect();
    let w = rand_t(&mut rng, &[batch, bb.feature_width()], -1.0, 1.0);
    let mut ids = enc.params(layout);
    ids.extend(bb.params());
    gradcheck_params(&format!("pipeline(seed {seed})"), &store, &ids, &[proprio], |tape, st, v| {
        let zp = enc.encode_proprio(tape, st, v[0])?;
        let zv = enc.encode_depth(tape, st, &depth)?;
        let tokens = enc.assemble(tape, st, Some(zp), Some(zv))?;
        let (h, _) = bb.forward(tape, st, tokens, layout, &states)?;
        weighted(tape, h, &w)
    })
}

fn module_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradcheckResult>, TensorError> {
    let mut out = Vec::new();
    for gated in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let cfg = SsmConfig {
            gated_skip: gated,
            ..tiny_ssm()
        };
        let bb = Backbone::new(&mut store, &cfg, rng);
        let layout = crate::ssm::TokenLayout {
            has_proprio: true,
            n_visual: 3,
        };
        let tokens = rand_t(rng, &[2, 4, 6], -1.0, 1.0);
        let states: Vec<Tensor<f64>> = (0..2).map(|_| rand_t(rng, &[2, 6, 3], -0.5, 0.5)).collect();
        let w = rand_t(rng, &[2, 4], -1.0, 1.0);
        let name = if gated { "ssm_backbone(gated)" } else { "ssm_backbone" };
        out.push(gradcheck_params(name, &store, &bb.params(), &[tokens], |t, st, v| {
            let (h, _) = bb.forward(t, st, v[0], layout, &states)?;
            weighted(t, h, &w)
        })?);
    }

    let mut store = ParamStore::<f64>::new();
    let attn = AttnBackbone::new(
        &mut store,
        &AttnConfig {
            width: 6,
            heads: 2,
            layers: 1,
            ffn: 7,
            head: vec![5],
        },
        rng,
    )?;
    let layout = crate::ssm::TokenLayout {
        has_proprio: true,
        n_visual: 3,
    };
    let tokens = rand_t(rng, &[2, 4, 6], -1.0, 1.0);
    let w = rand_t(rng, &[2, 5], -1.0, 1.0);
    out.push(gradcheck_params("attn_backbone", &store, &attn.params(), &[tokens], |t, st, v| {
        weighted(t, attn.forward(t, st, v[0], layout)?, &w)
    })?);

    let mut store = ParamStore::<f64>::new();
    let enc_cfg = tiny_encoder();
    let enc = Encoders::new(&mut store, &enc_cfg, rng)?;
    let layout = enc.layout(true, true);
    let proprio = rand_t(rng, &[2, 5], -1.0, 1.0);
    let depth = rand_t(rng, &[2, 2, 4, 4], 0.0, 5.0);
    let w = rand_t(rng, &[2, 5, 6], -1.0, 1.0);
    out.push(gradcheck_params("encoders", &store, &enc.params(layout), &[proprio], |t, st, v| {
        let zp = enc.encode_proprio(t, st, v[0])?;
        let zv = enc.encode_depth(t, st, &depth)?;
        weighted(t, enc.assemble(t, st, Some(zp), Some(zv))?, &w)
    })?);

    let mut store = ParamStore::<f64>::new();
    let policy = Policy::new(
        &mut store,
        4,
        &PolicyConfig {
            hidden: vec![5],
            ..PolicyConfig::default()
        },
        rng,
    )?;
    let h = rand_t(rng, &[3, 4], -1.0, 1.0);
    let a = rand_t(rng, &[3, 3], -1.0, 1.0);
    let ids: Vec<_> = policy.actor_params().into_iter().chain(policy.critic_params()).collect();
    let cfg = PpoConfig::default();
    let old: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..-2.0)).collect();
    let adv: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ret: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    out.push(gradcheck_params("policy+ppo_loss", &store, &ids, &[h, a], |t, st, v| {
        let (logp, ent, value) = policy.evaluate(t, st, v[0], v[1])?;
        Ok(ppo_losses(t, logp, ent, value, &old, &adv, &ret, &cfg)?.total)
    })?);
    Ok(out)
}

/// Runs the selected checks; the pipeline check runs once per seed.
pub fn run_gradcheck(component: Component, seeds: &[u64]) -> Result<GradReport, HarnessError> {
    let mut report = GradReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let all = component == Component::All;
    if all || component == Component::Ops {
        for (name, inputs, f) in op_cases(&mut rng) {
            report.rows.push(GradRow::from("op", gradcheck(name, &inputs, f)?, OP_TOL));
        }
    }
    if all || component == Component::Modules {
        for r in module_checks(&mut rng)? {
            report.rows.push(GradRow::from("module", r, PIPELINE_TOL));
        }
    }
    if all || component == Component::Pipeline {
        for &s in seeds {
            report.rows.push(GradRow::from("pipeline", pipeline_check(s)?, PIPELINE_TOL));
        }
    }
    if all || component == Component::Mutation {
        // a broken matmul adjoint must be caught; the row passes when it is
        let a = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_t(&mut rng, &[4, 2], -1.0, 1.0);
        let w = rand_t(&mut rng, &[3, 2], -1.0, 1.0);
        let r = gradcheck_with("mutated matmul adjoint", &[a, b], |t, v| weighted(t, t.matmul(v[0], v[1])?, &w), Some(("matmul", 1.5)))?;
        let caught = !r.passes(OP_TOL);
        let mut row = GradRow::from("mutation", r, OP_TOL);
        row.passed = caught;
        report.rows.push(row);
    }
    Ok(report)
}
