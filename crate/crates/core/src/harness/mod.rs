//! Experiment orchestration: configuration, the online collect/train loop,
//! offline training, evaluation rollouts, metrics and checkpoints.
//!
//! A run directory holds `config.toml` (the resolved configuration),
//! `metrics.jsonl`, `checkpoints/` and `final.ckpt`.

mod agent;
mod checkpoint;
mod config;
mod eval;
mod expert;
mod metrics;
mod trainer;

pub use agent::{Agent, StepLosses, StepRngs};
pub use checkpoint::{
    BufferState, Checkpoint, Counters, ModelState, ParamArray, PartialEpisode, CHECKPOINT_VERSION,
};
pub use config::{
    AgentConfig, AgentKind, EnvConfig, ExperimentConfig, OfflineConfig, ScheduleConfig,
};
pub use eval::{
    default_threads, evaluate, run_episode, EpisodeResult, EvalPolicy, EvalReport, UniformPolicy,
};
pub use expert::{generate_expert_dataset, ExpertConfig};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use trainer::{
    load_agent, resume_online, train_offline, train_online, RunSummary, CONFIG_FILE,
    FINAL_CHECKPOINT, METRICS_FILE,
};

use crate::envs::{make_env, Environment, MazeLayout, PointMaze, PointMazeConfig};
use crate::Result;

/// Instantiates the configured environment.
pub fn build_env(config: &EnvConfig) -> Result<Box<dyn Environment>> {
    if let Some(layout) = MazeLayout::builtin(&config.name) {
        return Ok(Box::new(build_point_maze(config, layout?)?));
    }
    make_env(
        &config.name,
        Some(config.horizon),
        Some(config.success_radius),
    )
}

pub(crate) fn build_point_maze(config: &EnvConfig, layout: MazeLayout) -> Result<PointMaze> {
    PointMaze::new(
        layout,
        PointMazeConfig {
            max_episode_steps: config.horizon,
            success_radius: config.success_radius,
            start_noise: config.start_noise,
            ..PointMazeConfig::default()
        },
    )
}
