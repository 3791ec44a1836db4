//! Kinematic corridor world with thin obstacles, rugged relief and moving
//! obstacles, per-episode plant randomization, delayed observations and a
//! depth camera.

mod config;
mod randomization;
mod world;

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{EnvConfig, Scenario};
pub use randomization::{ranges, CurriculumSchedule, RandomizationDraw, KP_NOMINAL};
pub use world::{DepthCamera, HeightField, Layout, Obstacle};

use crate::diffcore::TensorError;
use crate::encoders::{perturb_depth, Observation};

pub const ALPHA_FWD: f64 = 1.0;
pub const ALPHA_ENERGY: f64 = 0.005;
pub const ALPHA_ALIVE: f64 = 0.1;

/// Peak forward acceleration at unit command, m/s².
const ACCEL: f64 = 3.0;
/// Speed damping is `DAMPING * kd * v`; nominal top speed is `ACCEL / (DAMPING · 0.6)`.
const DAMPING: f64 = 2.5;
pub const NOMINAL_SPEED: f64 = 2.0;
pub const NOMINAL_TURN: f64 = 2.0;
const TURN_RESPONSE: f64 = 10.0;
const BRAKE: f64 = 5.0;
const LATERAL_DECAY: f64 = 4.0;
const SLIP: f64 = 0.1;
const TERRAIN_DRAG: f64 = 5.0;
const BLOWUP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DoneReason {
    Horizon,
    /// Speed or turn rate beyond the blow-up bound.
    Fall,
    /// Penetration beyond half the obstacle's smaller half-extent.
    Collision,
    OutOfBounds,
    Goal,
}

impl DoneReason {
    pub fn name(self) -> &'static str {
        match self {
            DoneReason::Horizon => "horizon",
            DoneReason::Fall => "fall",
            DoneReason::Collision => "collision",
            DoneReason::OutOfBounds => "out-of-bounds",
            DoneReason::Goal => "goal",
        }
    }

    /// Failure terminations end an evaluation run early.
    pub fn is_failure(self) -> bool {
        matches!(self, DoneReason::Fall | DoneReason::Collision | DoneReason::OutOfBounds)
    }
}

/// Reward components; `total` is their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub forward: f64,
    pub energy: f64,
    pub alive: f64,
    pub total: f64,
}

impl RewardTerms {
    pub fn compose(forward: f64, energy: f64, alive: f64) -> Self {
        Self {
            forward,
            energy,
            alive,
            total: ALPHA_FWD * forward + ALPHA_ENERGY * energy + ALPHA_ALIVE * alive,
        }
    }
}

/// Agent kinematic state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Agent {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Body-frame forward and lateral speed.
    pub v_fwd: f64,
    pub v_lat: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub agent: Agent,
    pub layout: Layout,
    pub draw: RandomizationDraw,
    pub step: usize,
    pub contact: bool,
    pub last_actions: VecDeque<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub terms: RewardTerms,
    pub collision: bool,
    pub penetration: f64,
    /// World-frame velocity over the step.
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: Option<DoneReason>,
    pub info: StepInfo,
}

/// One row of the per-step episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLogRow {
    pub episode: usize,
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub r_forward: f64,
    pub r_energy: f64,
    pub r_alive: f64,
    pub reward: f64,
    pub collision: bool,
    pub done_reason: String,
}

pub const STEP_LOG_HEADER: [&str; 11] = [
    "episode",
    "t",
    "x",
    "y",
    "heading",
    "r_forward",
    "r_energy",
    "r_alive",
    "reward",
    "collision",
    "done_reason",
];

impl StepLogRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.episode.to_string(),
            self.t.to_string(),
            self.x.to_string(),
            self.y.to_string(),
            self.heading.to_string(),
            self.r_forward.to_string(),
            self.r_energy.to_string(),
            self.r_alive.to_string(),
            self.reward.to_string(),
            self.collision.to_string(),
            self.done_reason.clone(),
        ]
    }
}

#[derive(Debug, Clone)]
struct Snapshot {
    proprio: Vec<f32>,
    frame: Vec<f32>,
}

/// One single-stream environment instance.
pub struct Env {
    pub config: EnvConfig,
    pub camera: DepthCamera,
    rng: ChaCha8Rng,
    state: Option<WorldState>,
    history: VecDeque<Snapshot>,
    lag: usize,
    episode: usize,
    start_x: f64,
    log: Option<Vec<StepLogRow>>,
}

impl Env {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        Ok(Self {
            camera: DepthCamera::from_config(&config),
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: None,
            history: VecDeque::new(),
            lag: 0,
            episode: 0,
            start_x: 0.0,
            log: None,
        })
    }

    pub fn state(&self) -> Option<&WorldState> {
        self.state.as_ref()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn latency_steps(&self) -> usize {
        self.lag
    }

    /// Most recent depth frame as captured, before the latency delay.
    pub fn newest_frame(&self) -> Option<&[f32]> {
        self.history.back().map(|s| s.frame.as_slice())
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    /// Displacement along `+x` since the episode started.
    pub fn distance(&self) -> f64 {
        self.state.as_ref().map(|s| s.agent.x - self.start_x).unwrap_or(0.0)
    }

    pub fn enable_log(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn take_log(&mut self) -> Vec<StepLogRow> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Replaces the active scenario; takes effect at the next reset.
    pub fn set_scenario(&mut self, scenario: Scenario) {
        self.config.scenario = scenario;
    }

    pub fn reset(&mut self, density: f64) -> Result<Observation, TensorError> {
        if !(0.0..=1.0).contains(&density) {
            return Err(TensorError::Config(format!("density {density} outside [0, 1]")));
        }
        if self.state.is_some() {
            self.episode += 1;
        }
        let layout = Layout::generate(&self.config, density, &mut self.rng);
        let draw = if self.config.randomize {
            RandomizationDraw::sample(&mut self.rng)
        } else {
            RandomizationDraw::nominal()
        };
        let agent = Agent {
            x: 0.5,
            ..Default::default()
        };
        self.start_x = agent.x;
        self.lag = self.config.latency_steps(draw.latency);
        let zeros = vec![0.0; self.config.action_dim];
        self.state = Some(WorldState {
            agent,
            layout,
            draw,
            step: 0,
            contact: false,
            last_actions: std::iter::repeat_n(zeros, 3).collect(),
        });
        let snap = self.snapshot();
        self.history = std::iter::repeat_n(snap, self.config.frames + self.lag).collect();
        Ok(self.observation())
    }

    fn snapshot(&mut self) -> Snapshot {
        let s = self.state.as_ref().expect("reset before use");
        let a = &s.agent;
        let mut proprio = vec![0.0f32; self.config.proprio_dim];
        let head = [a.v_fwd, a.v_lat, a.omega, a.heading.sin(), a.heading.cos(), s.contact as u8 as f64];
        for (k, v) in head.iter().enumerate() {
            proprio[k] = *v as f32;
        }
        for (k, v) in s.last_actions.iter().flatten().enumerate() {
            proprio[6 + k] = *v as f32;
        }
        let mut frame = self.camera.render(a.x, a.y, a.heading, &s.layout);
        if self.config.depth_noise {
            frame = perturb_depth(&frame, self.config.max_range as f32, &mut self.rng).0;
        }
        Snapshot { proprio, frame }
    }

    /// The delivered observation: delayed by the latency, frames oldest first.
    pub fn observation(&self) -> Observation {
        let idx = self.history.len() - 1 - self.lag;
        let first = idx + 1 - self.config.frames;
        Observation {
            proprio: self.history[idx].proprio.clone(),
            depth: (first..=idx).flat_map(|i| self.history[i].frame.iter().copied()).collect(),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, TensorError> {
        let cfg = self.config.clone();
        if action.len() != cfg.action_dim {
            return Err(TensorError::Shape(format!("{} action values, expected {}", action.len(), cfg.action_dim)));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "env.step action" });
        }
        let state = self.state.as_mut().ok_or_else(|| TensorError::Config("step before reset".into()))?;
        let dr = state.draw;
        let dt = cfg.dt;
        let deadzone = |u: f64| u.signum() * (u.abs() - dr.motor_friction).max(0.0);
        let drive = dr.action_gain() * dr.motor_strength;
        let a = &mut state.agent;
        let (x0, y0) = (a.x, a.y);

        let accel = ACCEL * drive * deadzone(action[0]) / dr.mass_scale;
        a.v_fwd += dt * (accel - DAMPING * dr.kd * a.v_fwd);
        if action[2] > 0.0 {
            a.v_fwd *= (-BRAKE * action[2].min(1.0) * dt).exp();
        }
        let omega_target = NOMINAL_TURN * drive * deadzone(action[1]) / dr.inertia_scale;
        a.omega += (omega_target - a.omega) * (1.0 - (-dt * TURN_RESPONSE / dr.inertia_scale).exp());
        a.v_lat += SLIP * a.v_fwd * a.omega * dt;
        a.v_lat *= (-LATERAL_DECAY * dr.friction * dt).exp();

        let scale = match &state.layout.terrain {
            Some(hf) => {
                let g = hf.gradient(a.x, a.y);
                1.0 / (1.0 + TERRAIN_DRAG * (g[0] * g[0] + g[1] * g[1]).sqrt())
            }
            None => 1.0,
        };
        let (s, c) = a.heading.sin_cos();
        a.x += (a.v_fwd * c - a.v_lat * s) * dt * scale;
        a.y += (a.v_fwd * s + a.v_lat * c) * dt * scale;
        a.heading = wrap_angle(a.heading + a.omega * dt);

        let half_w = cfg.arena_width / 2.0;
        for ob in &mut state.layout.obstacles {
            if ob.vx != 0.0 || ob.vy != 0.0 {
                ob.advance(dt, cfg.obstacle_start, cfg.arena_length, half_w);
            }
        }

        // collisions: push out of every overlapping box, drop the inbound velocity
        let mut collision = false;
        let mut penetration: f64 = 0.0;
        let mut unrecoverable = false;
        for ob in &state.layout.obstacles {
            let (dist, n) = ob.footprint_distance(a.x, a.y);
            let depth = cfg.agent_radius - dist;
            if depth > 0.0 {
                collision = true;
                penetration = penetration.max(depth);
                if depth > 0.5 * ob.hx.min(ob.hy) {
                    unrecoverable = true;
                }
                a.x += n[0] * depth;
                a.y += n[1] * depth;
                let (s, c) = a.heading.sin_cos();
                let (wx, wy) = (a.v_fwd * c - a.v_lat * s, a.v_fwd * s + a.v_lat * c);
                let inbound = wx * n[0] + wy * n[1];
                if inbound < 0.0 {
                    let (wx, wy) = (wx - inbound * n[0], wy - inbound * n[1]);
                    a.v_fwd = wx * c + wy * s;
                    a.v_lat = -wx * s + wy * c;
                }
            }
        }

        let velocity = [(a.x - x0) / dt, (a.y - y0) / dt];
        state.step += 1;
        state.contact = collision;
        state.last_actions.pop_front();
        state.last_actions.push_back(action.to_vec());

        let speed = (a.v_fwd * a.v_fwd + a.v_lat * a.v_lat).sqrt();
        let done = if speed > BLOWUP * NOMINAL_SPEED || a.omega.abs() > BLOWUP * NOMINAL_TURN {
            Some(DoneReason::Fall)
        } else if unrecoverable {
            Some(DoneReason::Collision)
        } else if a.y.abs() > half_w {
            Some(DoneReason::OutOfBounds)
        } else if a.x >= cfg.arena_length {
            Some(DoneReason::Goal)
        } else if state.step >= cfg.horizon {
            Some(DoneReason::Horizon)
        } else {
            None
        };
        let energy = -action.iter().map(|u| (dr.motor_strength * u).powi(2)).sum::<f64>();
        let alive = if done.is_some_and(DoneReason::is_failure) { 0.0 } else { 1.0 };
        let terms = RewardTerms::compose(velocity[0], energy, alive);

        if let Some(log) = &mut self.log {
            log.push(StepLogRow {
                episode: self.episode,
                t: state.step,
                x: a.x,
                y: a.y,
                heading: a.heading,
                r_forward: terms.forward,
                r_energy: terms.energy,
                r_alive: terms.alive,
                reward: terms.total,
                collision,
                done_reason: done.map(|d| d.name()).unwrap_or("").to_string(),
            });
        }

        let snap = self.snapshot();
        self.history.pop_front();
        self.history.push_back(snap);
        Ok(StepResult {
            obs: self.observation(),
            reward: terms.total,
            done,
            info: StepInfo {
                terms,
                collision,
                penetration,
                velocity,
            },
        })
    }
}

fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    (a + std::f64::consts::PI).rem_euclid(t) - std::f64::consts::PI
}

/// Summary of one finished (or cut) episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub ret: f64,
    pub steps: usize,
    pub collisions: usize,
    pub distance: f64,
    pub done: Option<DoneReason>,
}

/// Metrics of one evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_return: f64,
    /// Colliding control steps over the run; absent when not informative.
    pub collision_times: Option<usize>,
    /// Mean displacement along `+x` per episode.
    pub distance: f64,
    pub episodes: usize,
}

pub fn eval_metrics(episodes: &[EpisodeSummary], report_collisions: bool) -> Result<EvalMetrics, TensorError> {
    if episodes.is_empty() {
        return Err(TensorError::Empty("evaluation run without episodes"));
    }
    let n = episodes.len() as f64;
    Ok(EvalMetrics {
        mean_return: episodes.iter().map(|e| e.ret).sum::<f64>() / n,
        collision_times: report_collisions.then(|| episodes.iter().map(|e| e.collisions).sum()),
        distance: episodes.iter().map(|e| e.distance).sum::<f64>() / n,
        episodes: episodes.len(),
    })
}

/// Runs up to `episodes` episodes with `policy`, stopping early after a
/// failure termination.
pub fn run_segment(
    env: &mut Env,
    density: f64,
    episodes: usize,
    mut policy: impl FnMut(&Observation, bool) -> Result<Vec<f64>, TensorError>,
) -> Result<Vec<EpisodeSummary>, TensorError> {
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(density)?;
        let mut first = true;
        let mut summary = EpisodeSummary {
            ret: 0.0,
            steps: 0,
            collisions: 0,
            distance: 0.0,
            done: None,
        };
        loop {
            let action = policy(&obs, first)?;
            first = false;
            let r = env.step(&action)?;
            summary.ret += r.reward;
            summary.steps += 1;
            summary.collisions += r.info.collision as usize;
            obs = r.obs;
            if let Some(d) = r.done {
                summary.done = Some(d);
                break;
            }
        }
        summary.distance = env.distance();
        out.push(summary);
        if summary.done.is_some_and(DoneReason::is_failure) {
            break;
        }
    }
    Ok(out)
}

pub fn write_step_log(path: &Path, rows: &[StepLogRow]) -> Result<(), Box<dyn std::error::Error>> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a scenario config file (TOML key/value).
pub fn load_env_config(path: &Path) -> Result<EnvConfig, Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(path)?;
    let cfg: EnvConfig = toml::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Deterministic per-stream seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + 1);
    rng.random()
}
