use serde::{Deserialize, Serialize};

use crate::diffcore::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    ThinObstacle,
    RuggedTerrain,
    DynamicObstacle,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::ThinObstacle, Scenario::RuggedTerrain, Scenario::DynamicObstacle];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ThinObstacle => "thin-obstacle",
            Scenario::RuggedTerrain => "rugged-terrain",
            Scenario::DynamicObstacle => "dynamic-obstacle",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "thin-obstacle" | "thin" => Ok(Scenario::ThinObstacle),
            "rugged-terrain" | "rugged" => Ok(Scenario::RuggedTerrain),
            "dynamic-obstacle" | "dynamic" => Ok(Scenario::DynamicObstacle),
            _ => Err(format!("unknown scenario `{s}` (thin-obstacle, rugged-terrain, dynamic-obstacle)")),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Corridor world, sensor and episode settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub scenario: Scenario,
    /// Corridor spans `x ∈ [0, arena_length]`, `|y| ≤ arena_width / 2`.
    pub arena_length: f64,
    pub arena_width: f64,
    /// Obstacles are placed for `x ≥ obstacle_start`.
    pub obstacle_start: f64,
    /// Obstacle count at density 1.
    pub max_obstacles: usize,
    pub obstacle_half_thickness: f64,
    pub obstacle_half_length: [f64; 2],
    pub obstacle_height: f64,
    /// Speed range of moving obstacles (dynamic scenario), m/s.
    pub obstacle_speed: [f64; 2],
    /// Upper bound of the height field (rugged scenario), m.
    pub height_amplitude: f64,
    pub height_cell: f64,
    pub agent_radius: f64,
    pub camera_height: f64,
    pub depth_height: usize,
    pub depth_width: usize,
    pub fov_h_deg: f64,
    pub fov_v_deg: f64,
    pub max_range: f64,
    pub frames: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
    pub dt: f64,
    pub horizon: usize,
    /// Sample the per-episode plant parameters; otherwise use nominal values.
    pub randomize: bool,
    /// Salt-like saturation noise on every rendered frame.
    pub depth_noise: bool,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::ThinObstacle,
            arena_length: 14.0,
            arena_width: 4.0,
            obstacle_start: 2.5,
            max_obstacles: 8,
            obstacle_half_thickness: 0.05,
            obstacle_half_length: [0.3, 0.8],
            obstacle_height: 0.5,
            obstacle_speed: [0.2, 0.6],
            height_amplitude: 0.05,
            height_cell: 0.25,
            agent_radius: 0.15,
            camera_height: 0.3,
            depth_height: 16,
            depth_width: 16,
            fov_h_deg: 90.0,
            fov_v_deg: 60.0,
            max_range: 5.0,
            frames: 4,
            proprio_dim: 15,
            action_dim: 3,
            dt: 0.02,
            horizon: 250,
            randomize: true,
            depth_noise: true,
            seed: 0,
        }
    }
}

impl EnvConfig {
    /// 64×64 depth, 93-D proprio, 999-step episodes in a longer corridor.
    pub fn paper() -> Self {
        Self {
            arena_length: 50.0,
            max_obstacles: 30,
            depth_height: 64,
            depth_width: 64,
            proprio_dim: 93,
            horizon: 999,
            ..Self::default()
        }
    }

    /// Observation delay in control steps.
    pub fn latency_steps(&self, latency: f64) -> usize {
        (latency / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: String| Err(TensorError::Config(m));
        if !(self.arena_length > self.obstacle_start && self.arena_width > 4.0 * self.agent_radius) {
            return bad("arena too small".into());
        }
        if !(0.0..=0.05).contains(&self.height_amplitude) {
            return bad(format!("height_amplitude {} outside [0, 0.05]", self.height_amplitude));
        }
        if self.obstacle_half_length[0] > self.obstacle_half_length[1] || self.obstacle_speed[0] > self.obstacle_speed[1] {
            return bad("ranges must be ordered".into());
        }
        if self.action_dim < 3 {
            return bad("action_dim must be at least 3".into());
        }
        let needed = 6 + 3 * self.action_dim;
        if self.proprio_dim < needed {
            return bad(format!("proprio_dim {} < {needed} required by {} actions", self.proprio_dim, self.action_dim));
        }
        if self.depth_height == 0 || self.depth_width == 0 || self.frames == 0 || !(self.max_range > 0.0) {
            return bad("empty depth sensor".into());
        }
        if !(self.dt > 0.0) || self.horizon == 0 || !(self.height_cell > 0.0) {
            return bad("dt, horizon and height_cell must be positive".into());
        }
        Ok(())
    }
}
