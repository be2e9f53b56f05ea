use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::build_point_maze;
use super::config::EnvConfig;
use crate::envs::{distance_field, Action, Environment, MazeLayout};
use crate::numcore::{rng_stream, Streams};
use crate::replay::{DatasetMeta, Trajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub episodes: usize,
    /// Gaussian action noise, as a fraction of the per-step bound.
    pub action_noise: f64,
    pub seed: u64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            episodes: 200,
            action_noise: 0.2,
            seed: 0,
        }
    }
}

/// Rollouts of a noisy shortest-path controller in a point maze. Each step
/// heads for the centre of the next cell on a BFS path to the goal cell, or
/// straight for the goal inside it.
pub fn generate_expert_dataset(
    env_config: &EnvConfig,
    config: &ExpertConfig,
) -> Result<(DatasetMeta, Vec<Trajectory>)> {
    let layout = MazeLayout::builtin(&env_config.name).ok_or_else(|| {
        Error::Config(format!(
            "expert data needs a point maze, not `{}`",
            env_config.name
        ))
    })??;
    if !(config.action_noise >= 0.0) {
        return Err(Error::Config(format!(
            "action_noise must be >= 0, got {}",
            config.action_noise
        )));
    }
    let mut env = build_point_maze(env_config, layout.clone())?;
    let bound = env.config().max_step;
    let noise = Normal::new(0.0, config.action_noise * bound).expect("finite std");
    let mut rng = rng_stream(config.seed, Streams::Env);
    let mut trajectories = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        let goal = env.sample_goal(&mut rng);
        let goal_cell = env.cell_of(&goal).expect("goals are cell centres");
        let field = distance_field(&layout, goal_cell)?;
        let mut states = vec![env.reset(&goal, &mut rng)?];
        let mut actions = Vec::new();
        loop {
            let pos = env.position();
            let cell = env.cell_of(&pos).expect("agent stays in the grid");
            let target = match field[cell.0][cell.1] {
                Some(d) if d > 0 => {
                    let (r, c) = (cell.0 as isize, cell.1 as isize);
                    let next = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
                        .into_iter()
                        .filter(|&(nr, nc)| layout.is_free(nr, nc))
                        .map(|(nr, nc)| (nr as usize, nc as usize))
                        .find(|&(nr, nc)| field[nr][nc] == Some(d - 1))
                        .expect("BFS predecessor exists");
                    env.cell_centre(next)
                }
                _ => [goal[0], goal[1]],
            };
            let a: Vec<f64> = (0..2)
                .map(|i| (target[i] - pos[i] + noise.sample(&mut rng)).clamp(-bound, bound))
                .collect();
            let step = env.step(&Action::Continuous(a.clone()), &mut rng)?;
            actions.push(a);
            states.push(step.observation);
            if step.done {
                break;
            }
        }
        let to_array =
            |v: &[Vec<f64>]| Array2::from_shape_vec((v.len(), 2), v.concat()).expect("2 columns");
        trajectories.push(Trajectory::new(
            to_array(&states),
            to_array(&actions),
            goal,
        )?);
    }
    let meta = DatasetMeta {
        env: env_config.name.clone(),
        observation_dim: 2,
        action_dim: 2,
        goal_dim: 2,
        num_trajectories: trajectories.len(),
        description: format!(
            "noisy shortest-path expert, action noise {} x bound, seed {}",
            config.action_noise, config.seed
        ),
    };
    Ok((meta, trajectories))
}
