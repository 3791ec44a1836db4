use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::analytics::{self, EfficiencyStats, StabilityStats};
use super::config::{RunConfig, Variant};
use super::model::{FusionModel, Sample};
use super::HarnessError;
use crate::diffcore::checkpoint::{self, RngState};
use crate::diffcore::{ParamStore, Real, TensorError};
use crate::encoders::Observation;
use crate::envsim::{eval_metrics, run_segment, stream_seed, Env, EvalMetrics, Scenario};
use crate::ppo::{compute_gae, update, PpoOptimizers, Rollout, UpdateStats};
use crate::ssm::CarriedState;

const INIT_STREAM: u64 = 1_000;
const ACT_STREAM: u64 = 1_001;
const EVAL_STREAM: u64 = 2_000;
const RANDOM_STREAM: u64 = 3_000;

/// Marker written for metrics that are not reported.
pub const ABSENT: &str = "NA";

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| ABSENT.to_string())
}

/// CSV file with a fixed header, flushed after every row.
pub struct CsvLog {
    w: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        Ok(Self { w })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), HarnessError> {
        self.w.write_record(fields)?;
        self.w.flush().map_err(|e| HarnessError::Io {
            path: PathBuf::from("<csv>"),
            source: e,
        })
    }
}

pub const UPDATES_HEADER: [&str; 13] = [
    "iter",
    "samples",
    "density",
    "loss_clip",
    "loss_value",
    "entropy",
    "approx_kl",
    "clip_frac",
    "grad_norm",
    "adv_mean",
    "lr_policy",
    "lr_value",
    "minibatches",
];
pub const EPISODES_HEADER: [&str; 8] = ["iter", "env", "episode", "return", "steps", "collisions", "distance", "done_reason"];
pub const RETURNS_HEADER: [&str; 3] = ["iter", "mean_return", "finished"];
pub const EVAL_HEADER: [&str; 7] = ["iter", "scenario", "run", "return", "collision_times", "distance", "episodes"];
pub const EVAL_SUMMARY_HEADER: [&str; 9] = [
    "iter",
    "scenario",
    "runs",
    "return_mean",
    "return_std",
    "collisions_mean",
    "collisions_std",
    "distance_mean",
    "distance_std",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinishedEpisode {
    pub iter: usize,
    pub env: usize,
    pub episode: usize,
    pub ret: f64,
    pub steps: usize,
    pub collisions: usize,
    pub distance: f64,
    pub done_reason: String,
}

/// What one iteration produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub samples: usize,
    pub density: f64,
    pub stats: UpdateStats,
    pub finished: Vec<FinishedEpisode>,
}

/// Mean ± std over evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub iter: usize,
    pub scenario: Scenario,
    pub runs: usize,
    pub ret: (f64, f64),
    pub collisions: Option<(f64, f64)>,
    pub distance: (f64, f64),
}

pub fn summarize_eval(iter: usize, scenario: Scenario, runs: &[EvalMetrics]) -> EvalSummary {
    let pick = |f: &dyn Fn(&EvalMetrics) -> f64| analytics::mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    let collisions = runs
        .iter()
        .map(|m| m.collision_times.map(|c| c as f64))
        .collect::<Option<Vec<f64>>>()
        .filter(|c| !c.is_empty())
        .map(|c| analytics::mean_std(&c));
    EvalSummary {
        iter,
        scenario,
        runs: runs.len(),
        ret: pick(&|m| m.mean_return),
        collisions,
        distance: pick(&|m| m.distance),
    }
}

pub fn eval_rows(iter: usize, scenario: Scenario, runs: &[EvalMetrics]) -> Vec<Vec<String>> {
    runs.iter()
        .enumerate()
        .map(|(r, m)| {
            vec![
                iter.to_string(),
                scenario.name().to_string(),
                r.to_string(),
                m.mean_return.to_string(),
                m.collision_times.map(|c| c.to_string()).unwrap_or_else(|| ABSENT.into()),
                m.distance.to_string(),
                m.episodes.to_string(),
            ]
        })
        .collect()
}

pub fn summary_row(s: &EvalSummary) -> Vec<String> {
    vec![
        s.iter.to_string(),
        s.scenario.name().to_string(),
        s.runs.to_string(),
        s.ret.0.to_string(),
        s.ret.1.to_string(),
        fmt_opt(s.collisions.map(|c| c.0)),
        fmt_opt(s.collisions.map(|c| c.1)),
        s.distance.0.to_string(),
        s.distance.1.to_string(),
    ]
}

/// Deterministic-policy evaluation: `runs` fresh environments, each playing
/// up to `episodes` episodes (a failure ends the run).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy<T: Real>(
    model: &FusionModel,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    scenario: Scenario,
    density: f64,
    runs: usize,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EvalMetrics>, HarnessError> {
    let mut env_cfg = cfg.env.clone();
    env_cfg.scenario = scenario;
    let base = stream_seed(seed, EVAL_STREAM);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    (0..runs)
        .map(|r| {
            let mut env = Env::new(env_cfg.clone(), stream_seed(base, r as u64))?;
            let mut state: CarriedState<T> = model.zero_state();
            let eps = run_segment(&mut env, density, episodes, |obs, first| {
                if first {
                    state = model.zero_state();
                }
                let (mut acts, mut next) = model.act(store, &[obs], &[&state], &mut unused, true)?;
                state = next.pop().unwrap_or_default();
                Ok(acts.pop().expect("one action").0.action)
            })?;
            Ok(eval_metrics(&eps, cfg.run.variant.reports_collisions())?)
        })
        .collect()
}

/// The same protocol with uniformly random actions.
pub fn random_policy_eval(
    cfg: &RunConfig,
    scenario: Scenario,
    density: f64,
    runs: usize,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EvalMetrics>, HarnessError> {
    let mut env_cfg = cfg.env.clone();
    env_cfg.scenario = scenario;
    let bounds = cfg.policy.bounds()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, RANDOM_STREAM));
    let base = stream_seed(seed, EVAL_STREAM);
    (0..runs)
        .map(|r| {
            let mut env = Env::new(env_cfg.clone(), stream_seed(base, r as u64))?;
            let eps = run_segment(&mut env, density, episodes, |_, _| {
                Ok(bounds.iter().map(|&b| rng.random_range(-b..=b)).collect())
            })?;
            Ok(eval_metrics(&eps, true)?)
        })
        .collect()
}

struct Stream<T: Real> {
    obs: Observation,
    state: CarriedState<T>,
    ret: f64,
    steps: usize,
    collisions: usize,
    episode: usize,
}

/// One seed's training state.
pub struct Trainer<T: Real> {
    pub cfg: RunConfig,
    pub seed: u64,
    pub model: FusionModel,
    pub store: ParamStore<T>,
    pub opt: PpoOptimizers<T>,
    pub iteration: usize,
    envs: Vec<Env>,
    streams: Vec<Stream<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(stream_seed(seed, INIT_STREAM));
        let mut store = ParamStore::new();
        let model = FusionModel::new(&mut store, cfg, &mut init)?;
        let opt = PpoOptimizers::new(&model, &store, &cfg.ppo);
        let density = cfg.curriculum.density(0);
        let mut envs = Vec::with_capacity(cfg.run.envs);
        let mut streams = Vec::with_capacity(cfg.run.envs);
        for e in 0..cfg.run.envs {
            let mut env = Env::new(cfg.env.clone(), stream_seed(seed, e as u64))?;
            if cfg.run.log_steps {
                env.enable_log();
            }
            let obs = env.reset(density)?;
            envs.push(env);
            streams.push(Stream {
                obs,
                state: model.zero_state(),
                ret: 0.0,
                steps: 0,
                collisions: 0,
                episode: 0,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            model,
            store,
            opt,
            iteration: 0,
            envs,
            streams,
            rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, ACT_STREAM)),
        })
    }

    /// Collect → GAE → PPO epochs → advance the curriculum.
    pub fn iterate(&mut self) -> Result<IterationLog, HarnessError> {
        let it = self.iteration;
        let density = self.cfg.curriculum.density(it);
        let steps = self.cfg.steps_per_env();
        let n = self.envs.len();
        let mut samples: Vec<Vec<Sample<T>>> = (0..n).map(|_| Vec::with_capacity(steps)).collect();
        let mut logp = vec![Vec::with_capacity(steps); n];
        let mut rewards = vec![Vec::with_capacity(steps); n];
        let mut values = vec![Vec::with_capacity(steps); n];
        let mut dones = vec![Vec::with_capacity(steps); n];
        let mut finished = Vec::new();

        for _ in 0..steps {
            let obs: Vec<&Observation> = self.streams.iter().map(|s| &s.obs).collect();
            let states: Vec<&CarriedState<T>> = self.streams.iter().map(|s| &s.state).collect();
            let (acts, next) = self.model.act(&self.store, &obs, &states, &mut self.rng, false)?;
            for (e, ((act, value), next_state)) in acts.into_iter().zip(next).enumerate() {
                let r = self.envs[e].step(&act.action)?;
                let s = &mut self.streams[e];
                s.ret += r.reward;
                s.steps += 1;
                s.collisions += r.info.collision as usize;
                let done = r.done.is_some();
                let (obs, state) = if let Some(reason) = r.done {
                    finished.push(FinishedEpisode {
                        iter: it,
                        env: e,
                        episode: s.episode,
                        ret: s.ret,
                        steps: s.steps,
                        collisions: s.collisions,
                        distance: self.envs[e].distance(),
                        done_reason: reason.name().to_string(),
                    });
                    s.ret = 0.0;
                    s.steps = 0;
                    s.collisions = 0;
                    s.episode += 1;
                    (self.envs[e].reset(density)?, self.model.zero_state())
                } else {
                    (r.obs, next_state)
                };
                samples[e].push(Sample {
                    obs: std::mem::replace(&mut s.obs, obs),
                    state: std::mem::replace(&mut s.state, state),
                    a_tilde: act.a_tilde,
                });
                logp[e].push(act.logp);
                rewards[e].push(r.reward);
                values[e].push(value);
                dones[e].push(done);
            }
        }

        let obs: Vec<&Observation> = self.streams.iter().map(|s| &s.obs).collect();
        let states: Vec<&CarriedState<T>> = self.streams.iter().map(|s| &s.state).collect();
        let bootstrap = self.model.values(&self.store, &obs, &states)?;
        let mut rollout = Rollout {
            samples: Vec::with_capacity(n * steps),
            logp_old: Vec::with_capacity(n * steps),
            advantages: Vec::with_capacity(n * steps),
            returns: Vec::with_capacity(n * steps),
        };
        for e in 0..n {
            let (adv, ret) = compute_gae(
                &rewards[e],
                &values[e],
                &dones[e],
                bootstrap[e],
                self.cfg.ppo.gamma,
                self.cfg.ppo.lambda,
            )?;
            rollout.samples.append(&mut samples[e]);
            rollout.logp_old.append(&mut logp[e]);
            rollout.advantages.extend(adv);
            rollout.returns.extend(ret);
        }
        let stats = update(&self.model, &mut self.store, &mut self.opt, &rollout, &self.cfg.ppo, &mut self.rng)?;
        self.iteration += 1;
        Ok(IterationLog {
            iter: it,
            samples: rollout.samples.len(),
            density,
            stats,
            finished,
        })
    }

    pub fn evaluate(&self, scenario: Scenario) -> Result<Vec<EvalMetrics>, HarnessError> {
        let r = &self.cfg.run;
        evaluate_policy(
            &self.model,
            &self.store,
            &self.cfg,
            scenario,
            r.eval_density,
            r.eval_runs,
            r.eval_episodes,
            self.seed,
        )
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), HarnessError> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "seed": self.seed,
            "iteration": self.iteration,
            "variant": self.cfg.run.variant.name(),
        });
        checkpoint::save(path, &self.store, Some(RngState::capture(&self.rng)), meta)?;
        Ok(())
    }

    /// Step-level rows gathered since the last call (with `log_steps`).
    pub fn take_step_logs(&mut self) -> Vec<(usize, crate::envsim::StepLogRow)> {
        self.envs
            .iter_mut()
            .enumerate()
            .flat_map(|(e, env)| env.take_log().into_iter().map(move |r| (e, r)))
            .collect()
    }
}

/// Analytics of a finished run, computed from the logged rows alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub iterations: usize,
    pub return_series: Vec<f64>,
    pub evals: Vec<EvalSummary>,
    pub stability: Option<StabilityStats>,
    pub efficiency: Option<EfficiencyStats>,
}

impl RunMetrics {
    /// Windows shrink to the series length when the run is shorter than
    /// the configured ones.
    pub fn from_logs(
        iterations: usize,
        finished: &[(usize, f64)],
        value_loss: &[f64],
        advantage: &[f64],
        evals: Vec<EvalSummary>,
        stability_window: usize,
        early_window: usize,
    ) -> Result<Self, HarnessError> {
        let return_series = analytics::return_series(finished, iterations).unwrap_or_default();
        let sw = stability_window.min(value_loss.len());
        let stability = if sw > 0 {
            Some(analytics::stability_stats(value_loss, advantage, sw)?)
        } else {
            None
        };
        let ew = early_window.min(return_series.len().saturating_sub(1));
        let efficiency = if ew > 0 {
            Some(analytics::efficiency_stats(&return_series, ew)?)
        } else {
            None
        };
        Ok(Self {
            iterations,
            return_series,
            evals,
            stability,
            efficiency,
        })
    }

    pub fn final_eval(&self) -> Option<&EvalSummary> {
        self.evals.last()
    }
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "variant",
    "seed",
    "iterations",
    "final_reward",
    "early_slope",
    "learning_efficiency",
    "auc_per_epoch",
    "efficiency_window",
    "cov_value_loss",
    "cov_advantage",
    "stability_window",
    "eval_distance_mean",
];

pub fn summary_fields(variant: Variant, seed: u64, m: &RunMetrics) -> Vec<String> {
    let e = m.efficiency;
    let s = m.stability;
    vec![
        variant.name().to_string(),
        seed.to_string(),
        m.iterations.to_string(),
        fmt_opt(e.map(|e| e.final_reward)),
        fmt_opt(e.map(|e| e.early_slope)),
        fmt_opt(e.map(|e| e.learning_efficiency)),
        fmt_opt(e.map(|e| e.auc_per_epoch)),
        e.map(|e| e.window.to_string()).unwrap_or_else(|| ABSENT.into()),
        fmt_opt(s.and_then(|s| s.cov_value_loss)),
        fmt_opt(s.and_then(|s| s.cov_advantage)),
        s.map(|s| s.window.to_string()).unwrap_or_else(|| ABSENT.into()),
        fmt_opt(m.final_eval().map(|e| e.distance.0)),
    ]
}

fn update_fields(log: &IterationLog, cfg: &RunConfig) -> Vec<String> {
    let s = &log.stats;
    vec![
        log.iter.to_string(),
        log.samples.to_string(),
        log.density.to_string(),
        s.loss_clip.to_string(),
        s.loss_value.to_string(),
        s.entropy.to_string(),
        s.approx_kl.to_string(),
        s.clip_frac.to_string(),
        s.grad_norm.to_string(),
        s.adv_mean.to_string(),
        cfg.ppo.lr_policy.to_string(),
        cfg.ppo.lr_value.to_string(),
        s.minibatches.to_string(),
    ]
}

fn episode_fields(f: &FinishedEpisode) -> Vec<String> {
    vec![
        f.iter.to_string(),
        f.env.to_string(),
        f.episode.to_string(),
        f.ret.to_string(),
        f.steps.to_string(),
        f.collisions.to_string(),
        f.distance.to_string(),
        f.done_reason.clone(),
    ]
}

/// Result of training one seed.
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: RunMetrics,
    pub checkpoint: PathBuf,
}

fn dump_divergence<T: Real>(trainer: &Trainer<T>, dir: &Path, err: &HarnessError) -> PathBuf {
    let dump = dir.join("divergence.json");
    let bad: Vec<String> = trainer
        .store
        .iter()
        .filter(|(_, _, v)| !v.all_finite())
        .map(|(_, name, _)| name.to_string())
        .collect();
    let body = serde_json::json!({
        "iteration": trainer.iteration,
        "seed": trainer.seed,
        "variant": trainer.cfg.run.variant.name(),
        "error": err.to_string(),
        "non_finite_params": bad,
    });
    let _ = fs::write(&dump, serde_json::to_string_pretty(&body).unwrap_or_default());
    let _ = trainer.save_checkpoint(&dir.join("diverged.xfck"));
    dump
}

/// Trains one seed, writing CSV logs, periodic evaluations and checkpoints
/// into `dir`.
pub fn train_seed<T: Real>(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<SeedRun, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut resolved = cfg.clone();
    resolved.run.seeds = vec![seed];
    fs::write(dir.join("config.toml"), resolved.to_toml()?).map_err(|e| HarnessError::io(dir, e))?;

    let mut trainer = Trainer::<T>::new(cfg, seed)?;
    let mut updates = CsvLog::create(&dir.join("updates.csv"), &UPDATES_HEADER)?;
    let mut episodes = CsvLog::create(&dir.join("episodes.csv"), &EPISODES_HEADER)?;
    let mut evals = CsvLog::create(&dir.join("eval.csv"), &EVAL_HEADER)?;
    let mut eval_summary = CsvLog::create(&dir.join("eval_summary.csv"), &EVAL_SUMMARY_HEADER)?;
    let mut steps = if cfg.run.log_steps {
        let mut h = vec!["env"];
        h.extend(crate::envsim::STEP_LOG_HEADER);
        Some(CsvLog::create(&dir.join("steps.csv"), &h)?)
    } else {
        None
    };

    let mut finished = Vec::new();
    let mut value_loss = Vec::new();
    let mut advantage = Vec::new();
    let mut summaries = Vec::new();
    let total = cfg.run.iterations;
    let scenario = cfg.scenario();
    for _ in 0..total {
        let log = match trainer.iterate() {
            Ok(log) => log,
            Err(err @ HarnessError::Tensor(TensorError::NonFinite { .. })) => {
                let dump = dump_divergence(&trainer, dir, &err);
                return Err(HarnessError::Diverged {
                    iteration: trainer.iteration,
                    dump,
                });
            }
            Err(e) => return Err(e),
        };
        updates.row(&update_fields(&log, cfg))?;
        for f in &log.finished {
            episodes.row(&episode_fields(f))?;
            finished.push((f.iter, f.ret));
        }
        if let Some(w) = steps.as_mut() {
            for (e, r) in trainer.take_step_logs() {
                let mut row = vec![e.to_string()];
                row.extend(r.fields());
                w.row(&row)?;
            }
        }
        value_loss.push(log.stats.loss_value);
        advantage.push(log.stats.adv_mean);

        let done = trainer.iteration;
        let every = cfg.run.eval_every;
        if (every > 0 && done % every == 0) || done == total {
            let runs = trainer.evaluate(scenario)?;
            for row in eval_rows(done, scenario, &runs) {
                evals.row(&row)?;
            }
            let s = summarize_eval(done, scenario, &runs);
            eval_summary.row(&summary_row(&s))?;
            summaries.push(s);
        }
        let ck = cfg.run.checkpoint_every;
        if ck > 0 && done % ck == 0 && done != total {
            trainer.save_checkpoint(&dir.join(format!("ckpt-{done:05}.xfck")))?;
        }
    }
    let checkpoint = dir.join("final.xfck");
    trainer.save_checkpoint(&checkpoint)?;

    let metrics = RunMetrics::from_logs(
        total,
        &finished,
        &value_loss,
        &advantage,
        summaries,
        cfg.run.stability_window,
        cfg.run.early_window,
    )?;
    let mut returns = CsvLog::create(&dir.join("returns.csv"), &RETURNS_HEADER)?;
    for (i, r) in metrics.return_series.iter().enumerate() {
        let count = finished.iter().filter(|(it, _)| *it == i).count();
        returns.row(&[i.to_string(), r.to_string(), count.to_string()])?;
    }
    let mut summary = CsvLog::create(&dir.join("summary.csv"), &SUMMARY_HEADER)?;
    summary.row(&summary_fields(cfg.run.variant, seed, &metrics))?;
    Ok(SeedRun {
        seed,
        dir: dir.to_path_buf(),
        metrics,
        checkpoint,
    })
}

/// Trains every configured seed into `<out>/seed-<s>`.
pub fn train(cfg: &RunConfig) -> Result<Vec<SeedRun>, HarnessError> {
    cfg.validate()?;
    cfg.run
        .seeds
        .iter()
        .map(|&s| train_seed::<f32>(cfg, s, &cfg.run.out.join(format!("seed-{s}"))))
        .collect()
}

/// A checkpoint with the configuration it was trained with.
pub struct LoadedPolicy {
    pub cfg: RunConfig,
    pub model: FusionModel,
    pub store: ParamStore<f32>,
    pub trained_seed: u64,
}

pub fn load_policy(path: &Path) -> Result<LoadedPolicy, HarnessError> {
    let (header, loaded) = checkpoint::load::<f32>(path)?;
    let cfg: RunConfig = serde_json::from_value(header.meta["config"].clone())
        .map_err(|e| HarnessError::Config(format!("checkpoint config: {e}")))?;
    let trained_seed = header.meta["seed"].as_u64().unwrap_or(0);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = FusionModel::new(&mut store, &cfg, &mut rng)?;
    checkpoint::restore_into(&mut store, &loaded)?;
    Ok(LoadedPolicy {
        cfg,
        model,
        store,
        trained_seed,
    })
}

/// Per-seed evaluation runs of a checkpoint.
pub struct EvalReport {
    pub variant: Variant,
    pub scenario: Scenario,
    pub per_seed: Vec<(u64, Vec<EvalMetrics>)>,
    pub summary: EvalSummary,
}

/// Zero-shot evaluation. A scenario or variant other than the trained one
/// only produces a warning.
pub fn evaluate_checkpoint(
    path: &Path,
    scenario: Option<Scenario>,
    variant: Option<Variant>,
    runs: usize,
    episodes: usize,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<EvalReport, HarnessError> {
    let lp = load_policy(path)?;
    let trained = lp.cfg.scenario();
    let scenario = scenario.unwrap_or(trained);
    if scenario != trained {
        eprintln!("warning: policy trained on {trained}, evaluating zero-shot on {scenario}");
    }
    if let Some(v) = variant.filter(|&v| v != lp.cfg.run.variant) {
        eprintln!("warning: requested variant {v}, checkpoint holds {}; using the checkpoint", lp.cfg.run.variant);
    }
    if seeds.is_empty() || runs == 0 || episodes == 0 {
        return Err(HarnessError::Config("evaluation needs seeds, runs and episodes".into()));
    }
    let mut per_seed = Vec::new();
    let mut all = Vec::new();
    for &s in seeds {
        let m = evaluate_policy(&lp.model, &lp.store, &lp.cfg, scenario, lp.cfg.run.eval_density, runs, episodes, s)?;
        all.extend(m.iter().copied());
        per_seed.push((s, m));
    }
    let summary = summarize_eval(0, scenario, &all);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let mut w = CsvLog::create(&dir.join(format!("eval-{}.csv", scenario.name())), &{
            let mut h = vec!["seed"];
            h.extend(EVAL_HEADER);
            h
        })?;
        for (s, m) in &per_seed {
            for row in eval_rows(0, scenario, m) {
                let mut r = vec![s.to_string()];
                r.extend(row);
                w.row(&r)?;
            }
        }
        let mut w = CsvLog::create(&dir.join(format!("eval-{}-summary.csv", scenario.name())), &EVAL_SUMMARY_HEADER)?;
        w.row(&summary_row(&summary))?;
    }
    Ok(EvalReport {
        variant: lp.cfg.run.variant,
        scenario,
        per_seed,
        summary,
    })
}

/// Reads the CSVs of one seed directory and recomputes its metrics.
pub fn metrics_from_dir(dir: &Path, stability_window: usize, early_window: usize) -> Result<RunMetrics, HarnessError> {
    let mut rdr = csv::Reader::from_path(dir.join("updates.csv"))?;
    let (mut value_loss, mut advantage) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        value_loss.push(parse_field(&rec, 4)?);
        advantage.push(parse_field(&rec, 9)?);
    }
    let mut finished = Vec::new();
    let mut rdr = csv::Reader::from_path(dir.join("episodes.csv"))?;
    for rec in rdr.records() {
        let rec = rec?;
        finished.push((parse_field(&rec, 0)? as usize, parse_field(&rec, 3)?));
    }
    let mut summaries = Vec::new();
    let eval_path = dir.join("eval.csv");
    if eval_path.exists() {
        let mut rdr = csv::Reader::from_path(eval_path)?;
        let mut groups: Vec<(usize, Scenario, Vec<EvalMetrics>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let iter = parse_field(&rec, 0)? as usize;
            let scenario: Scenario = rec[1].parse().map_err(HarnessError::Config)?;
            let m = EvalMetrics {
                mean_return: parse_field(&rec, 3)?,
                collision_times: if &rec[4] == ABSENT { None } else { Some(parse_field(&rec, 4)? as usize) },
                distance: parse_field(&rec, 5)?,
                episodes: parse_field(&rec, 6)? as usize,
            };
            match groups.last_mut() {
                Some(g) if g.0 == iter && g.1 == scenario => g.2.push(m),
                _ => groups.push((iter, scenario, vec![m])),
            }
        }
        summaries = groups.iter().map(|(i, s, m)| summarize_eval(*i, *s, m)).collect();
    }
    RunMetrics::from_logs(
        value_loss.len(),
        &finished,
        &value_loss,
        &advantage,
        summaries,
        stability_window,
        early_window,
    )
}

fn parse_field(rec: &csv::StringRecord, i: usize) -> Result<f64, HarnessError> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| HarnessError::Config(format!("bad csv field {i} in {rec:?}")))
}
