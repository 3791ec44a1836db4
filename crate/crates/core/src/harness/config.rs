use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attnbase::AttnConfig;
use crate::encoders::EncoderConfig;
use crate::envsim::{CurriculumSchedule, EnvConfig, Scenario};
use crate::policy::PolicyConfig;
use crate::ppo::PpoConfig;
use crate::ssm::SsmConfig;

/// Which fusion module sits between the encoders and the actor-critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    ProprioOnly,
    VisionOnlySsm,
    VisionOnlyAttn,
    Concat,
    SsmFusion,
    AttnFusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Ssm,
    Attn,
    Concat,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::ProprioOnly,
        Variant::VisionOnlySsm,
        Variant::VisionOnlyAttn,
        Variant::Concat,
        Variant::SsmFusion,
        Variant::AttnFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ProprioOnly => "proprio-only",
            Variant::VisionOnlySsm => "vision-only-ssm",
            Variant::VisionOnlyAttn => "vision-only-attn",
            Variant::Concat => "concat",
            Variant::SsmFusion => "ssm-fusion",
            Variant::AttnFusion => "attn-fusion",
        }
    }

    pub fn uses_proprio(self) -> bool {
        !matches!(self, Variant::VisionOnlySsm | Variant::VisionOnlyAttn)
    }

    pub fn uses_vision(self) -> bool {
        self != Variant::ProprioOnly
    }

    pub fn fusion(self) -> FusionKind {
        match self {
            Variant::ProprioOnly | Variant::VisionOnlySsm | Variant::SsmFusion => FusionKind::Ssm,
            Variant::VisionOnlyAttn | Variant::AttnFusion => FusionKind::Attn,
            Variant::Concat => FusionKind::Concat,
        }
    }

    /// Vision-only agents get no contact feedback, so their collision
    /// counts are reported as absent.
    pub fn reports_collisions(self) -> bool {
        self.uses_proprio()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown variant {s:?}")))
    }
}

/// Loop sizes, cadence and output settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub iterations: usize,
    /// Parallel environments; each keeps its episode across iterations.
    pub envs: usize,
    /// Evaluate every this many iterations (0 = only at the end).
    pub eval_every: usize,
    pub eval_runs: usize,
    pub eval_episodes: usize,
    /// Obstacle density used for evaluation.
    pub eval_density: f64,
    pub checkpoint_every: usize,
    pub stability_window: usize,
    pub early_window: usize,
    /// Also write the per-step CSV log.
    pub log_steps: bool,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            variant: Variant::SsmFusion,
            seeds: vec![0],
            iterations: 200,
            envs: 8,
            eval_every: 50,
            eval_runs: 10,
            eval_episodes: 3,
            eval_density: 1.0,
            checkpoint_every: 50,
            stability_window: 200,
            early_window: 120,
            log_steps: false,
            out: PathBuf::from("runs"),
        }
    }
}

/// Everything a run needs, one section per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvConfig,
    pub encoder: EncoderConfig,
    pub ssm: SsmConfig,
    pub attn: AttnConfig,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    pub curriculum: CurriculumSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Reduced setting that trains on one CPU core: 16×16 depth, narrow nets,
    /// 512 samples per iteration.
    pub fn desk() -> Self {
        let env = EnvConfig::default();
        let encoder = EncoderConfig {
            proprio_dim: env.proprio_dim,
            frames: env.frames,
            height: env.depth_height,
            width: env.depth_width,
            patch: 4,
            token_width: 32,
            proprio_hidden: vec![64],
            proprio_embed: 32,
            visual_embed: 32,
            max_range: env.max_range,
            temporal_pos: false,
        };
        let ssm = SsmConfig {
            width: 32,
            state: 8,
            head: vec![64, 64],
            ..SsmConfig::default()
        };
        let attn = AttnConfig {
            width: 32,
            heads: 2,
            layers: 2,
            ffn: 64,
            head: vec![64, 64],
        };
        let policy = PolicyConfig {
            hidden: vec![64, 64],
            ..PolicyConfig::default()
        };
        let ppo = PpoConfig {
            horizon: env.horizon,
            samples_per_iter: 512,
            minibatch: 128,
            lr_policy: 1e-3,
            lr_value: 1e-3,
            ..PpoConfig::default()
        };
        Self {
            run: RunSection::default(),
            env,
            encoder,
            ssm,
            attn,
            policy,
            ppo,
            curriculum: CurriculumSchedule::default(),
        }
    }

    /// Full-size setting: 64×64 depth, token width 128, 16,384 samples per
    /// iteration.
    pub fn paper() -> Self {
        let env = EnvConfig::paper();
        Self {
            run: RunSection {
                iterations: 122,
                ..RunSection::default()
            },
            encoder: EncoderConfig {
                proprio_dim: env.proprio_dim,
                max_range: env.max_range,
                ..EncoderConfig::default()
            },
            ssm: SsmConfig::default(),
            attn: AttnConfig::default(),
            policy: PolicyConfig::default(),
            ppo: PpoConfig {
                horizon: env.horizon,
                ..PpoConfig::default()
            },
            curriculum: CurriculumSchedule::default(),
            env,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.run.variant = variant;
        self
    }

    /// Parses a TOML file laid over the desk preset.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Self::desk().overlay(text)
    }

    /// Keys present in `text` replace those of `self`; everything else,
    /// including missing keys inside a present section, is kept.
    pub fn overlay(&self, text: &str) -> Result<Self, HarnessError> {
        let err = |e: &dyn fmt::Display| HarnessError::Config(e.to_string());
        let patch: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut base = toml::Table::try_from(self).map_err(|e| err(&e))?;
        merge(&mut base, patch);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::desk().overlay_file(path)
    }

    pub fn overlay_file(&self, path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        self.overlay(&text)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn scenario(&self) -> Scenario {
        self.env.scenario
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.env.validate()?;
        self.encoder.validate()?;
        self.ppo.validate()?;
        self.curriculum.validate()?;
        self.policy.bounds()?;
        let (e, n) = (&self.env, &self.encoder);
        if (n.proprio_dim, n.frames, n.height, n.width) != (e.proprio_dim, e.frames, e.depth_height, e.depth_width) {
            return bad(format!(
                "encoder expects proprio {} and depth {}x{}x{}, env produces {} and {}x{}x{}",
                n.proprio_dim, n.frames, n.height, n.width, e.proprio_dim, e.frames, e.depth_height, e.depth_width
            ));
        }
        if n.max_range != e.max_range {
            return bad("encoder and env disagree on max_range".into());
        }
        if self.ssm.width != n.token_width || self.attn.width != n.token_width {
            return bad(format!(
                "token width {} but ssm width {} and attention width {}",
                n.token_width, self.ssm.width, self.attn.width
            ));
        }
        if self.policy.action_dim != e.action_dim {
            return bad("policy and env disagree on the action dimension".into());
        }
        if self.ppo.horizon != e.horizon {
            return bad(format!("ppo horizon {} but env horizon {}", self.ppo.horizon, e.horizon));
        }
        let r = &self.run;
        if r.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if r.envs == 0 || r.iterations == 0 || r.eval_runs == 0 || r.eval_episodes == 0 {
            return bad("envs, iterations, eval_runs and eval_episodes must be positive".into());
        }
        if !(0.0..=1.0).contains(&r.eval_density) {
            return bad("eval_density must lie in [0, 1]".into());
        }
        if r.stability_window == 0 || r.early_window == 0 {
            return bad("analytics windows must be positive".into());
        }
        Ok(())
    }

    /// Control steps each environment contributes per iteration.
    pub fn steps_per_env(&self) -> usize {
        self.ppo.samples_per_iter.div_ceil(self.run.envs)
    }
}

/// Parses `0,1,2` or `0..3`.
fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, HarnessError> {
    let bad = || HarnessError::Config(format!("bad seed list {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    let seeds: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}
