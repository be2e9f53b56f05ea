use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critic::{CriticObjective, DEFAULT_CPC_REG_COEFF, DEFAULT_TD_WEIGHT_CLIP};
use crate::envs::make_env;
use crate::replay::GoalSource;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Nce,
    Cpc,
    CLearning,
    NcePlusC,
    Gcbc,
    ModelBased,
}

impl AgentKind {
    pub fn critic_objective(self) -> Option<CriticObjective> {
        match self {
            AgentKind::Nce => Some(CriticObjective::Nce),
            AgentKind::Cpc => Some(CriticObjective::Cpc),
            AgentKind::CLearning => Some(CriticObjective::CLearning),
            AgentKind::NcePlusC => Some(CriticObjective::NcePlusC),
            AgentKind::Gcbc | AgentKind::ModelBased => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Nce => "nce",
            AgentKind::Cpc => "cpc",
            AgentKind::CLearning => "c_learning",
            AgentKind::NcePlusC => "nce_plus_c",
            AgentKind::Gcbc => "gcbc",
            AgentKind::ModelBased => "model_based",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AgentKind::Nce,
            AgentKind::Cpc,
            AgentKind::CLearning,
            AgentKind::NcePlusC,
            AgentKind::Gcbc,
            AgentKind::ModelBased,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown agent variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Built-in maze name, or `grid:<maze>` for its tabular surrogate.
    pub name: String,
    pub gamma: f64,
    pub horizon: usize,
    pub success_radius: f64,
    /// Uniform start jitter per axis in meters (point mazes only).
    pub start_noise: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            name: "empty_5x5".into(),
            gamma: 0.99,
            horizon: 50,
            success_radius: 0.5,
            start_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub variant: AgentKind,
    pub repr_dim: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub goal_source: GoalSource,
    pub entropy_coeff: f64,
    pub filter_enabled: bool,
    pub filter_epsilon: f64,
    pub cpc_reg_coeff: f64,
    pub td_weight_clip: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            variant: AgentKind::Nce,
            repr_dim: 64,
            hidden: vec![256, 256],
            batch_size: 256,
            lr: 3e-4,
            goal_source: GoalSource::Random,
            entropy_coeff: 0.0,
            filter_enabled: false,
            filter_epsilon: f64::INFINITY,
            cpc_reg_coeff: DEFAULT_CPC_REG_COEFF,
            td_weight_clip: DEFAULT_TD_WEIGHT_CLIP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub initial_random_steps: u64,
    pub train_collect_interval: u64,
    pub samples_per_insert: u64,
    pub total_env_steps: u64,
    /// Env steps between evaluations; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub replay_capacity: usize,
    /// Gradient steps between loss records.
    pub log_interval: u64,
    /// Env steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            initial_random_steps: 10_000,
            train_collect_interval: 16,
            samples_per_insert: 256,
            total_env_steps: 1_000_000,
            eval_interval: 10_000,
            eval_episodes: 100,
            replay_capacity: 1_000_000,
            log_interval: 100,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    pub lambda: f64,
    pub num_critics: usize,
    /// Dataset path; the `train-offline --dataset` flag overrides it.
    pub dataset: String,
    pub train_steps: u64,
    /// Gradient steps between evaluations; 0 evaluates only at the end.
    pub eval_interval: u64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            lambda: 0.05,
            num_critics: 1,
            dataset: String::new(),
            train_steps: 100_000,
            eval_interval: 10_000,
        }
    }
}

/// A complete run description. Every key is optional in the file; missing
/// keys take the defaults above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub schedule: ScheduleConfig,
    pub offline: OfflineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            schedule: ScheduleConfig::default(),
            offline: OfflineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The resolved configuration, every key spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::to_toml`].
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                p.push(msg)
            }
        };
        let e = &self.env;
        if let Err(err) = make_env(
            &e.name,
            Some(e.horizon.max(1)),
            Some(e.success_radius.max(0.0)),
        ) {
            need(false, format!("env.name: {err}"));
        }
        need(
            (0.0..1.0).contains(&e.gamma),
            format!("env.gamma must lie in [0, 1), got {}", e.gamma),
        );
        need(e.horizon >= 1, "env.horizon must be at least 1".into());
        need(
            e.success_radius >= 0.0,
            format!("env.success_radius must be >= 0, got {}", e.success_radius),
        );
        need(
            (0.0..0.5).contains(&e.start_noise),
            format!(
                "env.start_noise must lie in [0, 0.5), got {}",
                e.start_noise
            ),
        );
        let a = &self.agent;
        let contrastive = matches!(a.variant, AgentKind::Nce | AgentKind::Cpc);
        need(a.repr_dim >= 1, "agent.repr_dim must be at least 1".into());
        need(
            a.hidden.iter().all(|&h| h >= 1),
            format!("agent.hidden sizes must be positive, got {:?}", a.hidden),
        );
        need(
            a.batch_size >= if contrastive { 2 } else { 1 },
            format!(
                "agent.batch_size {} too small for {}",
                a.batch_size, a.variant
            ),
        );
        need(
            a.lr > 0.0 && a.lr.is_finite(),
            format!("agent.lr must be positive, got {}", a.lr),
        );
        if let Err(err) = a.goal_source.validate() {
            need(false, format!("agent.goal_source: {err}"));
        }
        need(
            a.entropy_coeff >= 0.0,
            format!("agent.entropy_coeff must be >= 0, got {}", a.entropy_coeff),
        );
        need(
            a.filter_epsilon > 0.0,
            format!("agent.filter_epsilon must be > 0, got {}", a.filter_epsilon),
        );
        need(
            !a.filter_enabled
                || matches!(a.variant, AgentKind::Nce | AgentKind::Cpc | AgentKind::Gcbc),
            format!(
                "agent.filter_enabled is only supported for nce, cpc and gcbc, not {}",
                a.variant
            ),
        );
        need(
            a.cpc_reg_coeff >= 0.0,
            format!("agent.cpc_reg_coeff must be >= 0, got {}", a.cpc_reg_coeff),
        );
        need(
            a.td_weight_clip > 0.0,
            format!("agent.td_weight_clip must be > 0, got {}", a.td_weight_clip),
        );
        let s = &self.schedule;
        need(
            s.train_collect_interval >= 1,
            "schedule.train_collect_interval must be at least 1".into(),
        );
        need(
            s.samples_per_insert >= 1,
            "schedule.samples_per_insert must be at least 1".into(),
        );
        need(
            s.eval_episodes >= 1,
            "schedule.eval_episodes must be at least 1".into(),
        );
        need(
            s.log_interval >= 1,
            "schedule.log_interval must be at least 1".into(),
        );
        need(
            s.replay_capacity > e.horizon,
            format!(
                "schedule.replay_capacity {} must exceed env.horizon {}",
                s.replay_capacity, e.horizon
            ),
        );
        let o = &self.offline;
        need(
            (0.0..=1.0).contains(&o.lambda),
            format!("offline.lambda must lie in [0, 1], got {}", o.lambda),
        );
        need(
            o.num_critics >= 1,
            "offline.num_critics must be at least 1".into(),
        );
        p
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
