use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sampling ranges of the per-episode plant parameters.
pub mod ranges {
    pub const KP: [f64; 2] = [40.0, 90.0];
    pub const KD: [f64; 2] = [0.4, 0.8];
    pub const MASS_SCALE: [f64; 2] = [0.8, 1.2];
    pub const FRICTION: [f64; 2] = [0.5, 1.25];
    pub const MOTOR_STRENGTH: [f64; 2] = [0.8, 1.2];
    pub const MOTOR_FRICTION: [f64; 2] = [0.0, 0.05];
    pub const INERTIA_SCALE: [f64; 2] = [0.5, 1.5];
    pub const LATENCY: [f64; 2] = [0.0, 0.04];
}

/// Position gain normalizing constant: `action_gain = kp / KP_NOMINAL`.
pub const KP_NOMINAL: f64 = 65.0;

/// Plant parameters fixed for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomizationDraw {
    pub kp: f64,
    pub kd: f64,
    pub mass_scale: f64,
    pub friction: f64,
    pub motor_strength: f64,
    pub motor_friction: f64,
    pub inertia_scale: f64,
    pub latency: f64,
}

fn mid(r: [f64; 2]) -> f64 {
    0.5 * (r[0] + r[1])
}

impl RandomizationDraw {
    pub fn sample(rng: &mut impl Rng) -> Self {
        use ranges::*;
        let mut u = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
        Self {
            kp: u(KP),
            kd: u(KD),
            mass_scale: u(MASS_SCALE),
            friction: u(FRICTION),
            motor_strength: u(MOTOR_STRENGTH),
            motor_friction: u(MOTOR_FRICTION),
            inertia_scale: u(INERTIA_SCALE),
            latency: u(LATENCY),
        }
    }

    /// Mid-range plant with no latency and no motor friction.
    pub fn nominal() -> Self {
        use ranges::*;
        Self {
            kp: KP_NOMINAL,
            kd: mid(KD),
            mass_scale: 1.0,
            friction: mid(FRICTION),
            motor_strength: 1.0,
            motor_friction: 0.0,
            inertia_scale: 1.0,
            latency: 0.0,
        }
    }

    pub fn action_gain(&self) -> f64 {
        self.kp / KP_NOMINAL
    }

    pub fn in_range(&self) -> bool {
        use ranges::*;
        let inside = |v: f64, r: [f64; 2]| v >= r[0] && v <= r[1];
        inside(self.kp, KP)
            && inside(self.kd, KD)
            && inside(self.mass_scale, MASS_SCALE)
            && inside(self.friction, FRICTION)
            && inside(self.motor_strength, MOTOR_STRENGTH)
            && inside(self.motor_friction, MOTOR_FRICTION)
            && inside(self.inertia_scale, INERTIA_SCALE)
            && inside(self.latency, LATENCY)
    }
}

/// Linear obstacle-density ramp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumSchedule {
    pub start_density: f64,
    pub target_density: f64,
    pub ramp_iters: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            start_density: 0.25,
            target_density: 1.0,
            ramp_iters: 100,
        }
    }
}

impl CurriculumSchedule {
    pub fn density(&self, iter: usize) -> f64 {
        if self.ramp_iters == 0 || iter >= self.ramp_iters {
            return self.target_density;
        }
        let f = iter as f64 / self.ramp_iters as f64;
        self.start_density + (self.target_density - self.start_density) * f
    }

    pub fn validate(&self) -> Result<(), crate::diffcore::TensorError> {
        let ok = (0.0..=1.0).contains(&self.start_density)
            && (0.0..=1.0).contains(&self.target_density)
            && self.start_density <= self.target_density;
        if ok {
            Ok(())
        } else {
            Err(crate::diffcore::TensorError::Config(
                "curriculum densities must satisfy 0 ≤ start ≤ target ≤ 1".into(),
            ))
        }
    }
}
