//! Corridor geometry: thin boxes, the height field and the depth camera.

use rand::Rng;

use super::config::{EnvConfig, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
    pub height: f64,
    pub vx: f64,
    pub vy: f64,
}

impl Obstacle {
    /// Signed distance from a point to the box footprint and the outward
    /// unit normal at the closest point.
    pub fn footprint_distance(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let qx = dx.abs() - self.hx;
        let qy = dy.abs() - self.hy;
        if qx > 0.0 || qy > 0.0 {
            let ox = qx.max(0.0);
            let oy = qy.max(0.0);
            let d = (ox * ox + oy * oy).sqrt();
            (d, [ox * dx.signum() / d, oy * dy.signum() / d])
        } else if qx > qy {
            (qx, [dx.signum(), 0.0])
        } else {
            (qy, [0.0, dy.signum()])
        }
    }

    /// Moves with constant velocity, reflecting off the arena bounds.
    pub fn advance(&mut self, dt: f64, x_lo: f64, x_hi: f64, half_width: f64) {
        self.cx += self.vx * dt;
        self.cy += self.vy * dt;
        if self.cx - self.hx < x_lo {
            self.cx = 2.0 * (x_lo + self.hx) - self.cx;
            self.vx = self.vx.abs();
        } else if self.cx + self.hx > x_hi {
            self.cx = 2.0 * (x_hi - self.hx) - self.cx;
            self.vx = -self.vx.abs();
        }
        if self.cy - self.hy < -half_width {
            self.cy = 2.0 * (-half_width + self.hy) - self.cy;
            self.vy = self.vy.abs();
        } else if self.cy + self.hy > half_width {
            self.cy = 2.0 * (half_width - self.hy) - self.cy;
            self.vy = -self.vy.abs();
        }
    }

    /// Slab test of a ray against the 3-D box; returns the entry distance.
    pub fn ray_hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let lo = [self.cx - self.hx, self.cy - self.hy, 0.0];
        let hi = [self.cx + self.hx, self.cy + self.hy, self.height];
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-12 {
                if o[k] < lo[k] || o[k] > hi[k] {
                    return None;
                }
            } else {
                let inv = 1.0 / d[k];
                let (mut a, mut b) = ((lo[k] - o[k]) * inv, (hi[k] - o[k]) * inv);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                t0 = t0.max(a);
                t1 = t1.min(b);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some(t0)
    }
}

/// Bilinear height field on a regular grid starting at the origin corner
/// `(0, -width/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    pub y0: f64,
    pub values: Vec<f64>,
}

impl HeightField {
    pub fn random(cfg: &EnvConfig, rng: &mut impl Rng) -> Self {
        let nx = (cfg.arena_length / cfg.height_cell).ceil() as usize + 1;
        let ny = (cfg.arena_width / cfg.height_cell).ceil() as usize + 1;
        let amp = cfg.height_amplitude;
        let values = (0..nx * ny)
            .map(|_| if amp > 0.0 { rng.random_range(0.0..=amp) } else { 0.0 })
            .collect();
        Self {
            cell: cfg.height_cell,
            nx,
            ny,
            y0: -cfg.arena_width / 2.0,
            values,
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i.min(self.nx - 1) * self.ny + j.min(self.ny - 1)]
    }

    fn locate(&self, x: f64, y: f64) -> (usize, usize, f64, f64) {
        let gx = (x / self.cell).clamp(0.0, (self.nx - 1) as f64);
        let gy = ((y - self.y0) / self.cell).clamp(0.0, (self.ny - 1) as f64);
        let (i, j) = (gx.floor() as usize, gy.floor() as usize);
        (i, j, gx - i as f64, gy - j as f64)
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let (i, j, fx, fy) = self.locate(x, y);
        let (h00, h10, h01, h11) = (self.at(i, j), self.at(i + 1, j), self.at(i, j + 1), self.at(i + 1, j + 1));
        h00 * (1.0 - fx) * (1.0 - fy) + h10 * fx * (1.0 - fy) + h01 * (1.0 - fx) * fy + h11 * fx * fy
    }

    pub fn gradient(&self, x: f64, y: f64) -> [f64; 2] {
        let (i, j, fx, fy) = self.locate(x, y);
        let (h00, h10, h01, h11) = (self.at(i, j), self.at(i + 1, j), self.at(i, j + 1), self.at(i + 1, j + 1));
        [
            ((h10 - h00) * (1.0 - fy) + (h11 - h01) * fy) / self.cell,
            ((h01 - h00) * (1.0 - fx) + (h11 - h10) * fx) / self.cell,
        ]
    }
}

/// Static geometry plus moving obstacles of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub obstacles: Vec<Obstacle>,
    pub terrain: Option<HeightField>,
}

impl Layout {
    pub fn generate(cfg: &EnvConfig, density: f64, rng: &mut impl Rng) -> Self {
        let count = (density * cfg.max_obstacles as f64).round() as usize;
        let half_w = cfg.arena_width / 2.0;
        let span = cfg.arena_length - cfg.obstacle_start;
        let obstacles = (0..count)
            .map(|k| {
                let [l0, l1] = cfg.obstacle_half_length;
                let hy = if l0 == l1 { l0 } else { rng.random_range(l0..=l1) };
                // stratified along the corridor so obstacles do not pile up
                let slot = span / count as f64;
                let cx = cfg.obstacle_start + slot * (k as f64 + rng.random_range(0.2..0.8));
                let cy = rng.random_range(-half_w + hy..=half_w - hy);
                let (vx, vy) = if cfg.scenario == Scenario::DynamicObstacle {
                    let [s0, s1] = cfg.obstacle_speed;
                    let speed = if s0 == s1 { s0 } else { rng.random_range(s0..=s1) };
                    let dir = rng.random_range(0.0..std::f64::consts::TAU);
                    (speed * dir.cos(), speed * dir.sin())
                } else {
                    (0.0, 0.0)
                };
                Obstacle {
                    cx,
                    cy,
                    hx: cfg.obstacle_half_thickness,
                    hy,
                    height: cfg.obstacle_height,
                    vx,
                    vy,
                }
            })
            .collect();
        let terrain = (cfg.scenario == Scenario::RuggedTerrain).then(|| HeightField::random(cfg, rng));
        Self { obstacles, terrain }
    }
}

/// Pinhole-free angular camera: row 0 looks up, column 0 looks left.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthCamera {
    pub height: usize,
    pub width: usize,
    pub fov_h: f64,
    pub fov_v: f64,
    pub max_range: f64,
    pub mount: f64,
}

const MARCH_STEP: f64 = 0.02;

impl DepthCamera {
    pub fn from_config(cfg: &EnvConfig) -> Self {
        Self {
            height: cfg.depth_height,
            width: cfg.depth_width,
            fov_h: cfg.fov_h_deg.to_radians(),
            fov_v: cfg.fov_v_deg.to_radians(),
            max_range: cfg.max_range,
            mount: cfg.camera_height,
        }
    }

    /// Unit ray of pixel `(r, c)` for an agent heading `theta`.
    pub fn ray(&self, r: usize, c: usize, theta: f64) -> [f64; 3] {
        let yaw = theta + self.fov_h / 2.0 - (c as f64 + 0.5) / self.width as f64 * self.fov_h;
        let pitch = self.fov_v / 2.0 - (r as f64 + 0.5) / self.height as f64 * self.fov_v;
        [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin()]
    }

    /// Ray distance to the nearest obstacle or terrain relief, `max_range`
    /// when nothing is hit. The flat ground plane is not rendered.
    pub fn render(&self, x: f64, y: f64, theta: f64, layout: &Layout) -> Vec<f32> {
        let o = [x, y, self.mount];
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let d = self.ray(r, c, theta);
                let mut best = self.max_range;
                for ob in &layout.obstacles {
                    if let Some(t) = ob.ray_hit(o, d) {
                        best = best.min(t);
                    }
                }
                if let Some(hf) = &layout.terrain {
                    if let Some(t) = self.march(o, d, hf, best) {
                        best = best.min(t);
                    }
                }
                out.push(best.clamp(0.0, self.max_range) as f32);
            }
        }
        out
    }

    fn march(&self, o: [f64; 3], d: [f64; 3], hf: &HeightField, limit: f64) -> Option<f64> {
        if d[2] >= -1e-9 {
            return None;
        }
        let top = hf.values.iter().copied().fold(0.0, f64::max);
        if top <= 0.0 {
            return None;
        }
        let t_start = ((o[2] - top) / -d[2]).max(0.0);
        let t_end = (o[2] / -d[2]).min(limit);
        let mut t = t_start;
        while t <= t_end {
            let z = o[2] + t * d[2];
            let h = hf.height(o[0] + t * d[0], o[1] + t * d[1]);
            if z <= h && h > 0.0 {
                return Some(t);
            }
            t += MARCH_STEP;
        }
        None
    }
}
