use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{Agent, StepLosses, StepRngs};
use super::build_env;
use super::checkpoint::{BufferState, Checkpoint, Counters, PartialEpisode};
use super::config::ExperimentConfig;
use super::eval::{default_threads, evaluate, EvalReport};
use super::metrics::MetricsWriter;
use crate::envs::{EnvSpec, Environment};
use crate::numcore::{rng_stream, RngState, Streams};
use crate::replay::{read_dataset, FilterStats, Trajectory, TrajectoryBuffer};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env_steps: u64,
    pub grad_steps: u64,
    pub episodes: u64,
    pub final_eval: EvalReport,
    pub checkpoint: PathBuf,
}

fn prepare_dir(out: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out, e))?;
    let p = out.join(CONFIG_FILE);
    fs::write(&p, config.to_toml()).map_err(|e| Error::io(&p, e))
}

fn log_losses(metrics: &mut MetricsWriter, counters: &Counters, l: &StepLosses) -> Result<()> {
    if let Some(c) = l.critic {
        metrics.record(
            counters.grad_steps,
            counters.env_steps,
            "train/critic_loss",
            c,
        )?;
    }
    metrics.record(
        counters.grad_steps,
        counters.env_steps,
        "train/actor_loss",
        l.actor,
    )
}

fn log_eval(metrics: &mut MetricsWriter, counters: &Counters, r: &EvalReport) -> Result<()> {
    let (g, e) = (counters.grad_steps, counters.env_steps);
    metrics.record(g, e, "eval/success_rate", r.success_rate)?;
    metrics.record(g, e, "eval/success_stderr", r.success_stderr)?;
    metrics.record(g, e, "eval/mean_final_distance", r.mean_final_distance)
}

/// Parses and checks the configuration stored in a checkpoint.
fn checkpoint_config(ckpt: &Checkpoint) -> Result<ExperimentConfig> {
    let config = ExperimentConfig::from_toml(&ckpt.config_text)?;
    if config.hash() != ckpt.config_hash {
        return Err(Error::Integrity(
            "stored configuration does not match its hash".into(),
        ));
    }
    config.validate()?;
    Ok(config)
}

/// Rebuilds the agent stored in a checkpoint, with its configuration and
/// environment spec.
pub fn load_agent(path: &Path) -> Result<(ExperimentConfig, Agent, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let config = checkpoint_config(&ckpt)?;
    let spec = build_env(&config.env)?.spec().clone();
    let critics = ckpt
        .models
        .iter()
        .filter(|m| m.name.starts_with("critic"))
        .count();
    let mut agent = Agent::new(&config, &spec, critics.max(1))?;
    agent.load_models(&ckpt)?;
    Ok((config, agent, ckpt))
}

struct OnlineRun {
    config: ExperimentConfig,
    agent: Agent,
    env: Box<dyn Environment>,
    spec: EnvSpec,
    buffer: TrajectoryBuffer,
    env_rng: ChaCha8Rng,
    sampling_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    counters: Counters,
    partial: Option<PartialEpisode>,
    filter_stats: FilterStats,
    metrics: MetricsWriter,
    out: PathBuf,
}

impl OnlineRun {
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config.to_toml(),
            config_hash: self.config.hash(),
            counters: self.counters,
            models: self.agent.model_states(),
            rngs: vec![
                ("env".into(), RngState::capture(&self.env_rng)),
                ("sampling".into(), RngState::capture(&self.sampling_rng)),
                ("policy_noise".into(), RngState::capture(&self.noise_rng)),
            ],
            buffer: Some(BufferState::capture(&self.buffer)),
            env: self.partial.as_ref().map(|_| self.env.snapshot()),
            partial_episode: self.partial.clone(),
            filter_stats: self.filter_stats,
        }
    }

    fn collect_step(&mut self) -> Result<()> {
        if self.partial.is_none() {
            let goal = self.env.sample_goal(&mut self.env_rng);
            let obs = self.env.reset(&goal, &mut self.env_rng)?;
            self.partial = Some(PartialEpisode {
                states: vec![obs],
                actions: Vec::new(),
                goal,
            });
        }
        let ep = self.partial.as_ref().expect("episode started above");
        let obs = ep.states.last().expect("episode has a state");
        let action = if self.counters.env_steps < self.config.schedule.initial_random_steps {
            self.spec.action.sample_uniform(&mut self.env_rng)
        } else {
            let s = Array2::from_shape_vec((1, obs.len()), obs.clone()).expect("one row");
            let g = Array2::from_shape_vec((1, ep.goal.len()), ep.goal.clone()).expect("one row");
            let (a, _) =
                self.agent
                    .policy
                    .sample_action(&s.view(), &g.view(), &mut self.noise_rng)?;
            self.spec.action.decode(a.row(0).as_slice().expect("row"))?
        };
        let encoded = self.spec.action.encode(&action)?;
        let step = self.env.step(&action, &mut self.env_rng)?;
        self.counters.env_steps += 1;
        let ep = self.partial.as_mut().expect("episode started above");
        ep.actions.push(encoded);
        ep.states.push(step.observation);
        if step.done {
            let ep = self.partial.take().expect("episode in progress");
            let rows = |v: &[Vec<f64>]| {
                let cols = v[0].len();
                Array2::from_shape_vec((v.len(), cols), v.concat()).expect("equal row widths")
            };
            let traj = Trajectory::new(rows(&ep.states), rows(&ep.actions), ep.goal)?;
            self.buffer.insert(traj)?;
            self.counters.episodes += 1;
        }
        Ok(())
    }

    fn train_burst(&mut self) -> Result<()> {
        let s = &self.config.schedule;
        if self.buffer.is_empty() {
            return Ok(());
        }
        self.counters.grad_credit += (s.train_collect_interval * s.samples_per_insert) as f64
            / self.config.agent.batch_size as f64;
        let n = self.counters.grad_credit.floor();
        self.counters.grad_credit -= n;
        for _ in 0..n as u64 {
            let losses = self.agent.train_step(
                &self.config,
                &self.buffer,
                &mut self.filter_stats,
                StepRngs {
                    sampling: &mut self.sampling_rng,
                    noise: &mut self.noise_rng,
                },
            )?;
            self.counters.grad_steps += 1;
            if self.counters.grad_steps % self.config.schedule.log_interval == 0 {
                log_losses(&mut self.metrics, &self.counters, &losses)?;
                if self.config.agent.filter_enabled {
                    let f = &self.filter_stats;
                    let seen = (f.kept + f.excluded + f.zero_denominator).max(1);
                    let frac = f.kept as f64 / seen as f64;
                    self.metrics.record(
                        self.counters.grad_steps,
                        self.counters.env_steps,
                        "train/filter_kept_fraction",
                        frac,
                    )?;
                }
            }
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Result<EvalReport> {
        let c = &self.config;
        let r = evaluate(
            &c.env,
            &self.agent.policy,
            c.schedule.eval_episodes,
            c.seed,
            default_threads(),
        )?;
        log_eval(&mut self.metrics, &self.counters, &r)?;
        Ok(r)
    }

    fn run(mut self) -> Result<RunSummary> {
        let s = self.config.schedule.clone();
        let mut last_eval = None;
        while self.counters.env_steps < s.total_env_steps {
            self.collect_step()?;
            let t = self.counters.env_steps;
            if t > s.initial_random_steps
                && (t - s.initial_random_steps) % s.train_collect_interval == 0
            {
                self.train_burst()?;
            }
            if s.eval_interval > 0 && t % s.eval_interval == 0 {
                last_eval = Some((t, self.evaluate()?));
            }
            if s.checkpoint_interval > 0 && t % s.checkpoint_interval == 0 && t < s.total_env_steps
            {
                self.metrics.flush()?;
                let p = self
                    .out
                    .join(CHECKPOINT_DIR)
                    .join(format!("step_{t:010}.ckpt"));
                self.checkpoint().save(&p)?;
            }
        }
        let final_eval = match last_eval {
            Some((t, r)) if t == self.counters.env_steps => r,
            _ => self.evaluate()?,
        };
        self.metrics.flush()?;
        let path = self.out.join(FINAL_CHECKPOINT);
        self.checkpoint().save(&path)?;
        Ok(RunSummary {
            env_steps: self.counters.env_steps,
            grad_steps: self.counters.grad_steps,
            episodes: self.counters.episodes,
            final_eval,
            checkpoint: path,
        })
    }
}

/// Online training: collect with the current policy, interleave gradient
/// steps at the configured replay ratio, evaluate and checkpoint.
pub fn train_online(config: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    config.validate()?;
    prepare_dir(out, config)?;
    let env = build_env(&config.env)?;
    let spec = env.spec().clone();
    let agent = Agent::new(config, &spec, 1)?;
    let run = OnlineRun {
        config: config.clone(),
        agent,
        env,
        spec: spec.clone(),
        buffer: TrajectoryBuffer::new(config.schedule.replay_capacity, spec.goal_dim)?,
        env_rng: rng_stream(config.seed, Streams::Env),
        sampling_rng: rng_stream(config.seed, Streams::Sampling),
        noise_rng: rng_stream(config.seed, Streams::PolicyNoise),
        counters: Counters::default(),
        partial: None,
        filter_stats: FilterStats::default(),
        metrics: MetricsWriter::create(&out.join(METRICS_FILE), config.seed)?,
        out: out.to_path_buf(),
    };
    run.run()
}

/// Continues an online run from one of its checkpoints. Metrics recorded
/// after the checkpoint are discarded and regenerated, so the finished run
/// matches an uninterrupted one exactly.
pub fn resume_online(checkpoint: &Path, out: &Path) -> Result<RunSummary> {
    let (config, agent, ckpt) = load_agent(checkpoint)?;
    prepare_dir(out, &config)?;
    let mut env = build_env(&config.env)?;
    if let Some(snapshot) = &ckpt.env {
        env.restore(snapshot)?;
    }
    let buffer = ckpt
        .buffer
        .as_ref()
        .ok_or_else(|| {
            Error::Integrity(
                "checkpoint has no replay buffer; was it written by an offline run?".into(),
            )
        })?
        .restore()?;
    let run = OnlineRun {
        spec: env.spec().clone(),
        agent,
        env,
        buffer,
        env_rng: ckpt.rng("env")?.restore(),
        sampling_rng: ckpt.rng("sampling")?.restore(),
        noise_rng: ckpt.rng("policy_noise")?.restore(),
        counters: ckpt.counters,
        partial: ckpt.partial_episode.clone(),
        filter_stats: ckpt.filter_stats,
        metrics: MetricsWriter::resume(
            &out.join(METRICS_FILE),
            config.seed,
            ckpt.counters.env_steps,
        )?,
        out: out.to_path_buf(),
        config,
    };
    run.run()
}

/// Loads a dataset into a buffer that holds all of it, checking it against
/// the environment spec.
fn dataset_buffer(
    dataset: &Path,
    config: &ExperimentConfig,
    spec: &EnvSpec,
) -> Result<TrajectoryBuffer> {
    let (meta, trajectories) = read_dataset(dataset)?;
    if meta.env != config.env.name {
        return Err(Error::Dataset(format!(
            "dataset was recorded in `{}`, config names `{}`",
            meta.env, config.env.name
        )));
    }
    let want = (
        spec.observation_dim,
        spec.action.feature_dim(),
        spec.goal_dim,
    );
    let got = (meta.observation_dim, meta.action_dim, meta.goal_dim);
    if want != got {
        return Err(Error::Dataset(format!(
            "dataset dims (obs, act, goal) = {got:?} do not match the environment's {want:?}"
        )));
    }
    let total: usize = trajectories.iter().map(Trajectory::num_transitions).sum();
    let mut buffer = TrajectoryBuffer::new(total.max(1), spec.goal_dim)?;
    for t in trajectories {
        buffer.insert(t)?;
    }
    if buffer.is_empty() {
        return Err(Error::Dataset("dataset holds no trajectories".into()));
    }
    Ok(buffer)
}

/// Offline training on a fixed dataset; the environment is used only for
/// evaluation rollouts.
pub fn train_offline(config: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<RunSummary> {
    config.validate()?;
    let spec = build_env(&config.env)?.spec().clone();
    let buffer = dataset_buffer(dataset, config, &spec)?;
    prepare_dir(out, config)?;
    let mut agent = Agent::new(config, &spec, config.offline.num_critics)?;
    let mut sampling = rng_stream(config.seed, Streams::Sampling);
    let mut noise = rng_stream(config.seed, Streams::PolicyNoise);
    let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE), config.seed)?;
    let mut counters = Counters::default();
    let o = &config.offline;
    let eval = |agent: &Agent| {
        evaluate(
            &config.env,
            &agent.policy,
            config.schedule.eval_episodes,
            config.seed,
            default_threads(),
        )
    };
    let mut last_eval = None;
    for _ in 0..o.train_steps {
        let losses = agent.offline_step(
            config,
            &buffer,
            StepRngs {
                sampling: &mut sampling,
                noise: &mut noise,
            },
        )?;
        counters.grad_steps += 1;
        if counters.grad_steps % config.schedule.log_interval == 0 {
            log_losses(&mut metrics, &counters, &losses)?;
        }
        if o.eval_interval > 0 && counters.grad_steps % o.eval_interval == 0 {
            let r = eval(&agent)?;
            log_eval(&mut metrics, &counters, &r)?;
            last_eval = Some((counters.grad_steps, r));
        }
    }
    let final_eval = match last_eval {
        Some((g, r)) if g == counters.grad_steps => r,
        _ => {
            let r = eval(&agent)?;
            log_eval(&mut metrics, &counters, &r)?;
            r
        }
    };
    metrics.flush()?;
    let path = out.join(FINAL_CHECKPOINT);
    Checkpoint {
        config_text: config.to_toml(),
        config_hash: config.hash(),
        counters,
        models: agent.model_states(),
        rngs: vec![
            ("sampling".into(), RngState::capture(&sampling)),
            ("policy_noise".into(), RngState::capture(&noise)),
        ],
        buffer: None,
        env: None,
        partial_episode: None,
        filter_stats: FilterStats::default(),
    }
    .save(&path)?;
    Ok(RunSummary {
        env_steps: 0,
        grad_steps: counters.grad_steps,
        episodes: 0,
        final_eval,
        checkpoint: path,
    })
}
