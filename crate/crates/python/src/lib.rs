//! Python bindings: the simulator, checkpointed agents, the training and
//! evaluation drivers, and the numeric kernels used by the test suites.

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crossfuse::encoders::Observation;
use crossfuse::envsim::{Env, Scenario};
use crossfuse::harness::analytics;
use crossfuse::harness::train::{load_policy, LoadedPolicy};
use crossfuse::harness::{self as harness, BenchConfig, Component, RunConfig, Variant};
use crossfuse::ppo::compute_gae;
use crossfuse::ssm::{run_scan, CarriedState, ScanBackend, ScanInputs};

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn preset(paper: bool) -> RunConfig {
    if paper {
        RunConfig::paper()
    } else {
        RunConfig::desk()
    }
}

/// Corridor simulator with depth camera and proprioception.
#[pyclass(name = "Env", module = "pycrossfuse")]
struct PyEnv {
    env: Env,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (scenario = "thin-obstacle", seed = 0, paper = false))]
    fn new(scenario: &str, seed: u64, paper: bool) -> PyResult<Self> {
        let mut cfg = preset(paper).env;
        cfg.scenario = scenario.parse::<Scenario>().map_err(value_err)?;
        Ok(Self {
            env: Env::new(cfg, seed).map_err(value_err)?,
        })
    }

    /// Starts an episode; returns `(proprio, depth)` as flat lists.
    #[pyo3(signature = (density = 1.0))]
    fn reset(&mut self, density: f64) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let o = self.env.reset(density).map_err(value_err)?;
        Ok((o.proprio, o.depth))
    }

    /// Returns `(proprio, depth, reward, done_reason)`; `done_reason` is
    /// `None` while the episode runs.
    fn step(&mut self, action: Vec<f64>) -> PyResult<(Vec<f32>, Vec<f32>, f64, Option<String>)> {
        let r = self.env.step(&action).map_err(value_err)?;
        Ok((r.obs.proprio, r.obs.depth, r.reward, r.done.map(|d| d.name().to_string())))
    }

    #[getter]
    fn distance(&self) -> f64 {
        self.env.distance()
    }

    /// `(proprio_dim, frames, height, width, action_dim)`
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize, usize) {
        let c = &self.env.config;
        (c.proprio_dim, c.frames, c.depth_height, c.depth_width, c.action_dim)
    }
}

/// A trained policy restored from a checkpoint, with its recurrent state.
#[pyclass(name = "Agent", module = "pycrossfuse", unsendable)]
struct PyAgent {
    policy: LoadedPolicy,
    state: CarriedState<f32>,
    rng: ChaCha8Rng,
}

#[pymethods]
impl PyAgent {
    #[staticmethod]
    #[pyo3(signature = (path, seed = 0))]
    fn load(path: PathBuf, seed: u64) -> PyResult<Self> {
        let policy = load_policy(&path).map_err(value_err)?;
        let state = policy.model.zero_state();
        Ok(Self {
            policy,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.policy.cfg.run.variant.name()
    }

    #[getter]
    fn scenario(&self) -> &'static str {
        self.policy.cfg.scenario().name()
    }

    /// Clears the carried state; call at every episode start.
    fn reset(&mut self) {
        self.state = self.policy.model.zero_state();
    }

    /// Returns `(action, value)`.
    #[pyo3(signature = (proprio, depth, deterministic = true))]
    fn act(&mut self, proprio: Vec<f32>, depth: Vec<f32>, deterministic: bool) -> PyResult<(Vec<f64>, f64)> {
        let obs = Observation { proprio, depth };
        let p = &self.policy;
        let (mut acts, mut next) = p
            .model
            .act(&p.store, &[&obs], &[&self.state], &mut self.rng, deterministic)
            .map_err(value_err)?;
        self.state = next.pop().unwrap_or_default();
        let (a, v) = acts.pop().ok_or_else(|| runtime_err("no action"))?;
        Ok((a.action, v))
    }
}

/// The TOML of a preset configuration.
#[pyfunction]
#[pyo3(signature = (variant = "ssm-fusion", paper = false))]
fn config_toml(variant: &str, paper: bool) -> PyResult<String> {
    let v: Variant = variant.parse().map_err(value_err)?;
    preset(paper).with_variant(v).to_toml().map_err(value_err)
}

/// Trains one seed into `out`; returns the run's summary metrics.
#[pyfunction]
#[pyo3(signature = (config, seed, out))]
fn train<'py>(py: Python<'py>, config: &str, seed: u64, out: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::from_toml(config).map_err(value_err)?;
    let run = harness::train_seed::<f32>(&cfg, seed, &out).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("checkpoint", run.checkpoint)?;
    d.set_item("returns", run.metrics.return_series.clone())?;
    if let Some(e) = run.metrics.efficiency {
        d.set_item("final_reward", e.final_reward)?;
        d.set_item("early_slope", e.early_slope)?;
        d.set_item("learning_efficiency", e.learning_efficiency)?;
        d.set_item("auc_per_epoch", e.auc_per_epoch)?;
    }
    if let Some(s) = run.metrics.stability {
        d.set_item("cov_value_loss", s.cov_value_loss)?;
        d.set_item("cov_advantage", s.cov_advantage)?;
    }
    if let Some(e) = run.metrics.final_eval() {
        d.set_item("eval_return", e.ret.0)?;
        d.set_item("eval_distance", e.distance.0)?;
    }
    Ok(d)
}

/// Deterministic evaluation of a checkpoint, optionally on another scenario.
#[pyfunction]
#[pyo3(signature = (checkpoint, scenario = None, runs = 10, episodes = 3, seeds = vec![0]))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    scenario: Option<&str>,
    runs: usize,
    episodes: usize,
    seeds: Vec<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let sc = scenario.map(|s| s.parse::<Scenario>()).transpose().map_err(value_err)?;
    let rep = harness::evaluate_checkpoint(&checkpoint, sc, None, runs, episodes, &seeds, None).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("variant", rep.variant.name())?;
    d.set_item("scenario", rep.scenario.name())?;
    d.set_item("return", rep.summary.ret)?;
    d.set_item("collisions", rep.summary.collisions)?;
    d.set_item("distance", rep.summary.distance)?;
    Ok(d)
}

/// Advantages and returns of one stream of transitions.
#[pyfunction]
#[pyo3(signature = (rewards, values, dones, bootstrap, gamma = 0.99, lam = 0.95))]
fn gae(rewards: Vec<f64>, values: Vec<f64>, dones: Vec<bool>, bootstrap: f64, gamma: f64, lam: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    compute_gae(&rewards, &values, &dones, bootstrap, gamma, lam).map_err(value_err)
}

/// Selective scan over flat row-major inputs; returns `(y, final_state)`.
#[pyfunction]
#[pyo3(signature = (u, delta, a, b, c, x0, d, h, parallel = false))]
#[allow(clippy::too_many_arguments)]
fn selective_scan(
    u: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    x0: Vec<f64>,
    d: usize,
    h: usize,
    parallel: bool,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if d == 0 || h == 0 {
        return Err(value_err("d and h must be positive"));
    }
    let inp = ScanInputs {
        u: &u,
        delta: &delta,
        a: &a,
        b: &b,
        c: &c,
        d,
        h,
    };
    let backend = if parallel { ScanBackend::Parallel } else { ScanBackend::Sequential };
    let out = run_scan(&inp, &x0, false, backend).map_err(value_err)?;
    Ok((out.y, out.last))
}

/// `(final_reward, early_slope, learning_efficiency, auc_per_epoch)`
#[pyfunction]
#[pyo3(signature = (returns, early_window = 120))]
fn efficiency_stats(returns: Vec<f64>, early_window: usize) -> PyResult<(f64, f64, f64, f64)> {
    let e = analytics::efficiency_stats(&returns, early_window).map_err(value_err)?;
    Ok((e.final_reward, e.early_slope, e.learning_efficiency, e.auc_per_epoch))
}

/// CoV of the value-loss and advantage series over the trailing window;
/// `None` where the mean is zero.
#[pyfunction]
#[pyo3(signature = (value_loss, advantage, window = 200))]
fn stability_stats(value_loss: Vec<f64>, advantage: Vec<f64>, window: usize) -> PyResult<(Option<f64>, Option<f64>)> {
    let s = analytics::stability_stats(&value_loss, &advantage, window).map_err(value_err)?;
    Ok((s.cov_value_loss, s.cov_advantage))
}

/// Runs the finite-difference suite; returns `(passed, report)`.
#[pyfunction]
#[pyo3(signature = (component = "all", seeds = vec![0]))]
fn gradcheck(component: &str, seeds: Vec<u64>) -> PyResult<(bool, String)> {
    let c: Component = component.parse().map_err(value_err)?;
    let rep = harness::run_gradcheck(c, &seeds).map_err(runtime_err)?;
    Ok((rep.passed(), rep.render()))
}

/// Token-count scaling rows as `(kernel, tokens, p50_ns)` plus the
/// per-kernel log-log time slopes.
#[pyfunction]
#[pyo3(name = "bench", signature = (grid = vec![64, 128, 256, 512, 1024], repeats = 15, width = 128))]
fn bench_kernels(grid: Vec<usize>, repeats: usize, width: usize) -> PyResult<(Vec<(String, usize, f64)>, Vec<(String, f64)>)> {
    let cfg = BenchConfig {
        grid,
        repeats,
        width,
        ..BenchConfig::default()
    };
    let rows = harness::bench_scan(&cfg).map_err(value_err)?;
    let slopes = harness::kernel_slopes(&rows).into_iter().map(|s| (s.kernel, s.time)).collect();
    Ok((rows.into_iter().map(|r| (r.kernel, r.tokens, r.p50_ns)).collect(), slopes))
}

#[pymodule]
fn pycrossfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_class::<PyAgent>()?;
    m.add_function(wrap_pyfunction!(config_toml, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    m.add_function(wrap_pyfunction!(selective_scan, m)?)?;
    m.add_function(wrap_pyfunction!(efficiency_stats, m)?)?;
    m.add_function(wrap_pyfunction!(stability_stats, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(bench_kernels, m)?)?;
    m.add("VARIANTS", Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>())?;
    m.add("SCENARIOS", Scenario::ALL.iter().map(|s| s.name()).collect::<Vec<_>>())?;
    Ok(())
}
