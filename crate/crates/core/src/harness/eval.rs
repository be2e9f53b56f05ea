use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::build_env;
use super::config::EnvConfig;
use crate::actor::GoalPolicy;
use crate::envs::{goal_distance, success, Action, EnvSpec};
use crate::numcore::{rng_stream, Streams};
use crate::Result;

/// Chooses actions during evaluation rollouts.
pub trait EvalPolicy: Sync {
    fn act(
        &self,
        observation: &[f64],
        goal: &[f64],
        spec: &EnvSpec,
        rng: &mut dyn RngCore,
    ) -> Result<Action>;
}

/// Deterministic: `tanh(μ)` or the most likely discrete action.
impl EvalPolicy for GoalPolicy {
    fn act(
        &self,
        observation: &[f64],
        goal: &[f64],
        spec: &EnvSpec,
        _rng: &mut dyn RngCore,
    ) -> Result<Action> {
        let s =
            Array2::from_shape_vec((1, observation.len()), observation.to_vec()).expect("one row");
        let g = Array2::from_shape_vec((1, goal.len()), goal.to_vec()).expect("one row");
        let a = self.act_deterministic(&s.view(), &g.view())?;
        spec.action.decode(a.row(0).as_slice().expect("row"))
    }
}

/// Uniform over the action space, ignoring the goal.
pub struct UniformPolicy;

impl EvalPolicy for UniformPolicy {
    fn act(
        &self,
        _observation: &[f64],
        _goal: &[f64],
        spec: &EnvSpec,
        rng: &mut dyn RngCore,
    ) -> Result<Action> {
        Ok(spec.action.sample_uniform(rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub final_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    /// Binomial standard error `sqrt(p(1-p)/n)`.
    pub success_stderr: f64,
    pub mean_final_distance: f64,
}

impl EvalReport {
    pub fn from_episodes(results: &[EpisodeResult]) -> Self {
        let n = results.len().max(1) as f64;
        let p = results.iter().filter(|r| r.success).count() as f64 / n;
        EvalReport {
            episodes: results.len(),
            success_rate: p,
            success_stderr: (p * (1.0 - p) / n).sqrt(),
            mean_final_distance: results.iter().map(|r| r.final_distance).sum::<f64>() / n,
        }
    }
}

/// One rollout with a goal drawn from the environment's goal distribution.
/// Success counts if the goal is reached at any step, including the start.
pub fn run_episode(
    env_config: &EnvConfig,
    policy: &dyn EvalPolicy,
    seed: u64,
) -> Result<EpisodeResult> {
    let mut env = build_env(env_config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let goal = env.sample_goal(&mut rng);
    let mut obs = env.reset(&goal, &mut rng)?;
    let spec = env.spec().clone();
    let mut reached = success(&obs, &goal, &spec);
    loop {
        let action = policy.act(&obs, &goal, &spec, &mut rng)?;
        let step = env.step(&action, &mut rng)?;
        obs = step.observation;
        reached |= success(&obs, &goal, &spec);
        if step.done {
            break;
        }
    }
    Ok(EpisodeResult {
        success: reached,
        final_distance: goal_distance(&obs, &goal, &spec),
    })
}

/// Evaluates `episodes` rollouts. Episode seeds come from the run's `Eval`
/// stream, so results do not depend on `threads`.
pub fn evaluate(
    env_config: &EnvConfig,
    policy: &dyn EvalPolicy,
    episodes: usize,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    let mut rng = rng_stream(seed, Streams::Eval);
    let seeds: Vec<u64> = (0..episodes).map(|_| rng.random()).collect();
    let threads = threads.clamp(1, episodes.max(1));
    let chunk = episodes.div_ceil(threads).max(1);
    let results: Vec<Result<Vec<EpisodeResult>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&s| run_episode(env_config, policy, s))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut all = Vec::with_capacity(episodes);
    for r in results {
        all.extend(r?);
    }
    Ok(EvalReport::from_episodes(&all))
}

/// Worker count for evaluation: the machine's parallelism.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
