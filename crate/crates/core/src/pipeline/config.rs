//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` are comments. Every key can be overridden from the
//! environment as `OPTFORGE_<KEY>` with dots replaced by underscores and the
//! name upper-cased, e.g. `OPTFORGE_DDO_ALPHA=0.1`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::ddo::{RhoMode, TrainConfig};
use crate::expert::ExpertConfig;
use crate::gridworld::{Coord, GridMap, MdpSpec};
use crate::smdp::SmdpConfig;

pub const ENV_PREFIX: &str = "OPTFORGE_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertKind {
    Flat,
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionSetting {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub n_eval_tasks: usize,
    /// Fixed goal for the meta-policy; drawn from the seed when absent.
    pub goal: Option<Coord>,
    pub diffusion: DiffusionSetting,
    pub diffusion_samples: usize,
    pub diffusion_cap: usize,
    pub heldout_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterateSettings {
    pub outer_iterations: usize,
    pub sample_size: usize,
    pub agent_rollouts: usize,
    pub warm_start: bool,
    /// DDO epochs per outer iteration; 0 splits `ddo.epochs` evenly across iterations.
    pub ddo_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub map: String,
    pub mdp: MdpSpec,
    pub expert: ExpertConfig,
    pub expert_kind: ExpertKind,
    pub expert_smdp_episodes: usize,
    pub ddo: TrainConfig,
    pub smdp: SmdpConfig,
    pub eval: EvalSettings,
    pub iterate: IterateSettings,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            map: "fourroom".into(),
            mdp: MdpSpec::default(),
            expert: ExpertConfig::default(),
            expert_kind: ExpertKind::Flat,
            expert_smdp_episodes: 400,
            ddo: TrainConfig::default(),
            smdp: SmdpConfig::default(),
            eval: EvalSettings {
                n_eval_tasks: 100,
                goal: None,
                diffusion: DiffusionSetting::MonteCarlo,
                diffusion_samples: 2000,
                diffusion_cap: 10_000,
                heldout_trajectories: 50,
            },
            iterate: IterateSettings {
                outer_iterations: 3,
                sample_size: 200,
                agent_rollouts: 50,
                warm_start: true,
                ddo_epochs: 0,
            },
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

/// Every recognised key, in canonical dump order.
pub const KEYS: &[&str] = &[
    "map",
    "seed",
    "out",
    "mdp.slip_prob",
    "mdp.goal_reward",
    "mdp.step_reward",
    "mdp.discount",
    "mdp.max_episode_steps",
    "expert.kind",
    "expert.n_trajectories",
    "expert.temperature",
    "expert.vi_tol",
    "expert.vi_max_iters",
    "expert.smdp_episodes",
    "ddo.n_options",
    "ddo.learning_rate",
    "ddo.epochs",
    "ddo.minibatch",
    "ddo.lambda",
    "ddo.alpha",
    "ddo.init_scale",
    "ddo.rho",
    "smdp.episodes",
    "smdp.learning_rate",
    "smdp.epsilon_start",
    "smdp.epsilon_end",
    "smdp.epsilon_decay_fraction",
    "smdp.option_max_steps",
    "eval.n_tasks",
    "eval.goal",
    "eval.diffusion",
    "eval.diffusion_samples",
    "eval.diffusion_cap",
    "eval.heldout_trajectories",
    "iterate.n",
    "iterate.sample_size",
    "iterate.agent_rollouts",
    "iterate.warm_start",
    "iterate.ddo_epochs",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_coord(key: &str, value: &str) -> Result<Coord, ConfigError> {
    let (r, c) = value
        .split_once(',')
        .ok_or_else(|| bad(key, value, "expected `row,col`"))?;
    Ok((parse(key, r.trim())?, parse(key, c.trim())?))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "map" => self.map = v.to_string(),
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "mdp.slip_prob" => self.mdp.slip_prob = parse(key, v)?,
            "mdp.goal_reward" => self.mdp.goal_reward = parse(key, v)?,
            "mdp.step_reward" => self.mdp.step_reward = parse(key, v)?,
            "mdp.discount" => self.mdp.discount = parse(key, v)?,
            "mdp.max_episode_steps" => self.mdp.max_episode_steps = parse(key, v)?,
            "expert.kind" => {
                self.expert_kind = match v {
                    "flat" => ExpertKind::Flat,
                    "hierarchical" => ExpertKind::Hierarchical,
                    _ => return Err(bad(key, v, "expected flat or hierarchical")),
                }
            }
            "expert.n_trajectories" => self.expert.n_trajectories = parse(key, v)?,
            "expert.temperature" => {
                self.expert.temperature = match v {
                    "greedy" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "expert.vi_tol" => self.expert.vi_tol = parse(key, v)?,
            "expert.vi_max_iters" => self.expert.vi_max_iters = parse(key, v)?,
            "expert.smdp_episodes" => self.expert_smdp_episodes = parse(key, v)?,
            "ddo.n_options" => self.ddo.n_options = parse(key, v)?,
            "ddo.learning_rate" => self.ddo.learning_rate = parse(key, v)?,
            "ddo.epochs" => self.ddo.epochs = parse(key, v)?,
            "ddo.minibatch" => self.ddo.minibatch = parse(key, v)?,
            "ddo.lambda" => self.ddo.lambda = parse(key, v)?,
            "ddo.alpha" => self.ddo.alpha = parse(key, v)?,
            "ddo.init_scale" => self.ddo.init_scale = parse(key, v)?,
            "ddo.rho" => {
                self.ddo.rho = match v {
                    "expert-visitation" => RhoMode::ExpertVisitation,
                    "uniform" => RhoMode::Uniform,
                    _ => return Err(bad(key, v, "expected expert-visitation or uniform")),
                }
            }
            "smdp.episodes" => self.smdp.episodes = parse(key, v)?,
            "smdp.learning_rate" => self.smdp.learning_rate = parse(key, v)?,
            "smdp.epsilon_start" => self.smdp.epsilon_start = parse(key, v)?,
            "smdp.epsilon_end" => self.smdp.epsilon_end = parse(key, v)?,
            "smdp.epsilon_decay_fraction" => self.smdp.epsilon_decay_fraction = parse(key, v)?,
            "smdp.option_max_steps" => self.smdp.option_max_steps = parse(key, v)?,
            "eval.n_tasks" => self.eval.n_eval_tasks = parse(key, v)?,
            "eval.goal" => {
                self.eval.goal = match v {
                    "random" | "none" => None,
                    _ => Some(parse_coord(key, v)?),
                }
            }
            "eval.diffusion" => {
                self.eval.diffusion = match v {
                    "exact" => DiffusionSetting::Exact,
                    "monte-carlo" => DiffusionSetting::MonteCarlo,
                    _ => return Err(bad(key, v, "expected exact or monte-carlo")),
                }
            }
            "eval.diffusion_samples" => self.eval.diffusion_samples = parse(key, v)?,
            "eval.diffusion_cap" => self.eval.diffusion_cap = parse(key, v)?,
            "eval.heldout_trajectories" => self.eval.heldout_trajectories = parse(key, v)?,
            "iterate.n" => self.iterate.outer_iterations = parse(key, v)?,
            "iterate.sample_size" => self.iterate.sample_size = parse(key, v)?,
            "iterate.agent_rollouts" => self.iterate.agent_rollouts = parse(key, v)?,
            "iterate.warm_start" => self.iterate.warm_start = parse(key, v)?,
            "iterate.ddo_epochs" => self.iterate.ddo_epochs = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "map" => self.map.clone(),
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "mdp.slip_prob" => self.mdp.slip_prob.to_string(),
            "mdp.goal_reward" => self.mdp.goal_reward.to_string(),
            "mdp.step_reward" => self.mdp.step_reward.to_string(),
            "mdp.discount" => self.mdp.discount.to_string(),
            "mdp.max_episode_steps" => self.mdp.max_episode_steps.to_string(),
            "expert.kind" => match self.expert_kind {
                ExpertKind::Flat => "flat".into(),
                ExpertKind::Hierarchical => "hierarchical".into(),
            },
            "expert.n_trajectories" => self.expert.n_trajectories.to_string(),
            "expert.temperature" => self.expert.temperature.map_or("greedy".into(), |t| t.to_string()),
            "expert.vi_tol" => self.expert.vi_tol.to_string(),
            "expert.vi_max_iters" => self.expert.vi_max_iters.to_string(),
            "expert.smdp_episodes" => self.expert_smdp_episodes.to_string(),
            "ddo.n_options" => self.ddo.n_options.to_string(),
            "ddo.learning_rate" => self.ddo.learning_rate.to_string(),
            "ddo.epochs" => self.ddo.epochs.to_string(),
            "ddo.minibatch" => self.ddo.minibatch.to_string(),
            "ddo.lambda" => self.ddo.lambda.to_string(),
            "ddo.alpha" => self.ddo.alpha.to_string(),
            "ddo.init_scale" => self.ddo.init_scale.to_string(),
            "ddo.rho" => match self.ddo.rho {
                RhoMode::ExpertVisitation => "expert-visitation".into(),
                RhoMode::Uniform => "uniform".into(),
            },
            "smdp.episodes" => self.smdp.episodes.to_string(),
            "smdp.learning_rate" => self.smdp.learning_rate.to_string(),
            "smdp.epsilon_start" => self.smdp.epsilon_start.to_string(),
            "smdp.epsilon_end" => self.smdp.epsilon_end.to_string(),
            "smdp.epsilon_decay_fraction" => self.smdp.epsilon_decay_fraction.to_string(),
            "smdp.option_max_steps" => self.smdp.option_max_steps.to_string(),
            "eval.n_tasks" => self.eval.n_eval_tasks.to_string(),
            "eval.goal" => self.eval.goal.map_or("random".into(), |(r, c)| format!("{r},{c}")),
            "eval.diffusion" => match self.eval.diffusion {
                DiffusionSetting::Exact => "exact".into(),
                DiffusionSetting::MonteCarlo => "monte-carlo".into(),
            },
            "eval.diffusion_samples" => self.eval.diffusion_samples.to_string(),
            "eval.diffusion_cap" => self.eval.diffusion_cap.to_string(),
            "eval.heldout_trajectories" => self.eval.heldout_trajectories.to_string(),
            "iterate.n" => self.iterate.outer_iterations.to_string(),
            "iterate.sample_size" => self.iterate.sample_size.to_string(),
            "iterate.agent_rollouts" => self.iterate.agent_rollouts.to_string(),
            "iterate.warm_start" => self.iterate.warm_start.to_string(),
            "iterate.ddo_epochs" => self.iterate.ddo_epochs.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn env_var_name(key: &str) -> String {
        format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
    }

    /// Applies overrides from `lookup` (normally the process environment).
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        for key in KEYS {
            if let Some(v) = lookup(&Self::env_var_name(key)) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        self.apply_overrides(|name| std::env::var(name).ok())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Canonical dump; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Dump without the output directory, for hashing run identity.
    pub fn identity_text(&self) -> String {
        self.to_text().lines().filter(|l| !l.starts_with("out ")).collect::<Vec<_>>().join("\n")
    }

    pub fn validate(&self) -> Result<GridMap, ConfigError> {
        let map = GridMap::resolve(&self.map).map_err(|e| ConfigError::Invalid(format!("map {:?}: {e}", self.map)))?;
        self.mdp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ddo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(g) = self.eval.goal {
            if map.state_at(g).is_none() {
                return Err(ConfigError::Invalid(format!("eval.goal {g:?} is not a free cell")));
            }
        }
        if self.expert.n_trajectories == 0 {
            return Err(ConfigError::Invalid("expert.n_trajectories must be positive".into()));
        }
        if self.smdp.option_max_steps == 0 || self.smdp.learning_rate <= 0.0 {
            return Err(ConfigError::Invalid("smdp.option_max_steps and smdp.learning_rate must be positive".into()));
        }
        if self.eval.n_eval_tasks == 0 {
            return Err(ConfigError::Invalid("eval.n_tasks must be positive".into()));
        }
        if self.iterate.outer_iterations == 0 {
            return Err(ConfigError::Invalid("iterate.n must be at least 1".into()));
        }
        Ok(map)
    }
}
