//! Goal-conditioned environments. Environments report observations and an
//! episode-end flag only: there is no reward channel. Success is judged by
//! the evaluator from observations via [`success`].

mod maze;
mod tabular;

pub use maze::{
    distance_field, shortest_path_distance, Cell, MazeLayout, PointMaze, PointMazeConfig,
};
pub use tabular::{sample_categorical, TabularEnv, TabularMdp};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    /// Symmetric box `[-bound_i, bound_i]` per coordinate.
    Continuous {
        bound: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl ActionSpace {
    /// Width of the action encoding fed to networks: one-hot for discrete.
    pub fn feature_dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Continuous { bound } => bound.len(),
        }
    }

    pub fn sample_uniform(&self, rng: &mut dyn RngCore) -> Action {
        match self {
            ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..*n)),
            ActionSpace::Continuous { bound } => {
                Action::Continuous(bound.iter().map(|&b| rng.random_range(-b..=b)).collect())
            }
        }
    }

    pub fn encode(&self, action: &Action) -> Result<Vec<f64>> {
        match (self, action) {
            (ActionSpace::Discrete(n), Action::Discrete(i)) if i < n => {
                let mut v = vec![0.0; *n];
                v[*i] = 1.0;
                Ok(v)
            }
            (ActionSpace::Continuous { bound }, Action::Continuous(a))
                if a.len() == bound.len() =>
            {
                Ok(a.clone())
            }
            _ => Err(Error::Env(format!(
                "action {action:?} does not belong to {self:?}"
            ))),
        }
    }

    /// Inverse of [`ActionSpace::encode`]; discrete features decode by argmax.
    pub fn decode(&self, features: &[f64]) -> Result<Action> {
        if features.len() != self.feature_dim() {
            return Err(Error::shape(
                "action features",
                self.feature_dim(),
                features.len(),
            ));
        }
        Ok(match self {
            ActionSpace::Discrete(_) => Action::Discrete(argmax(features)),
            ActionSpace::Continuous { .. } => Action::Continuous(features.to_vec()),
        })
    }
}

/// Lowest index among maximal entries.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub observation_dim: usize,
    /// The goal is the leading `goal_dim` coordinates of an observation.
    pub goal_dim: usize,
    pub action: ActionSpace,
    pub success_radius: f64,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn goal_of<'a>(&self, observation: &'a [f64]) -> &'a [f64] {
        &observation[..self.goal_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub done: bool,
}

/// Complete mutable state of an environment instance, for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub values: Vec<f64>,
    pub goal: Vec<f64>,
    pub steps: usize,
    pub done: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, goal: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>>;
    fn step(&mut self, action: &Action, rng: &mut dyn RngCore) -> Result<Step>;
    /// Draws a goal from the environment's goal distribution.
    fn sample_goal(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn goal(&self) -> &[f64];
    fn snapshot(&self) -> EnvSnapshot;
    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()>;
}

/// True iff the goal slice of `observation` lies within the success radius
/// of `goal` (closed ball: distance equal to the radius counts).
pub fn success(observation: &[f64], goal: &[f64], spec: &EnvSpec) -> bool {
    goal_distance(observation, goal, spec) <= spec.success_radius
}

pub fn goal_distance(observation: &[f64], goal: &[f64], spec: &EnvSpec) -> f64 {
    spec.goal_of(observation)
        .iter()
        .zip(goal)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Named built-in environments.
pub fn make_env(
    name: &str,
    max_episode_steps: Option<usize>,
    success_radius: Option<f64>,
) -> Result<Box<dyn Environment>> {
    if let Some(layout) = MazeLayout::builtin(name) {
        let mut config = PointMazeConfig::default();
        if let Some(h) = max_episode_steps {
            config.max_episode_steps = h;
        }
        if let Some(r) = success_radius {
            config.success_radius = r;
        }
        return Ok(Box::new(PointMaze::new(layout?, config)?));
    }
    if let Some(grid) = name.strip_prefix("grid:") {
        let layout = MazeLayout::builtin(grid)
            .ok_or_else(|| Error::Config(format!("unknown maze `{grid}`")))??;
        let mdp = TabularMdp::from_maze(&layout, 0.99)?;
        return Ok(Box::new(TabularEnv::new(
            mdp,
            max_episode_steps.unwrap_or(50),
        )?));
    }
    Err(Error::Config(format!(
        "unknown environment `{name}` (expected one of {:?} or `grid:<maze>`)",
        MazeLayout::BUILTIN
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn success_is_closed_ball() {
        let spec = EnvSpec {
            observation_dim: 2,
            goal_dim: 2,
            action: ActionSpace::Continuous {
                bound: vec![1.0, 1.0],
            },
            success_radius: 0.5,
            max_episode_steps: 10,
        };
        assert!(success(&[1.0, 1.0], &[1.0, 1.0], &spec));
        assert!(success(&[1.5, 1.0], &[1.0, 1.0], &spec));
        assert!(!success(&[1.5 + 1e-12, 1.0], &[1.0, 1.0], &spec));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn encode_decode() {
        let space = ActionSpace::Discrete(4);
        let f = space.encode(&Action::Discrete(2)).unwrap();
        assert_eq!(f, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(space.decode(&f).unwrap(), Action::Discrete(2));
        assert!(space.encode(&Action::Discrete(4)).is_err());
    }
}
