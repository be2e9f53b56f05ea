//! Goal-conditioned policies `π(a | s, g)` and their objectives.
//!
//! Continuous policies are diagonal Gaussians squashed by `tanh` into the
//! action box; `σ = softplus(raw) + min_std`. Discrete policies are
//! categorical over one-hot encoded actions.

mod losses;
mod policy;

pub use losses::{
    actor_loss, bc_loss, offline_actor_loss, policy_objective, ActionScorer, MinOfCritics,
};
pub use policy::{GoalPolicy, PolicyHead, DEFAULT_MIN_STD};

use serde::{Deserialize, Serialize};

use crate::replay::GoalSource;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorConfig {
    pub goal_source: GoalSource,
    pub entropy_coeff: f64,
    pub offline_lambda: f64,
    pub num_critics: usize,
}

impl Default for ActorConfig {
    fn default() -> Self {
        ActorConfig {
            goal_source: GoalSource::Random,
            entropy_coeff: 0.0,
            offline_lambda: 0.0,
            num_critics: 1,
        }
    }
}

impl ActorConfig {
    pub fn validate(&self) -> Result<()> {
        self.goal_source.validate()?;
        if !(self.entropy_coeff >= 0.0) {
            return Err(Error::Config(format!(
                "entropy_coeff must be >= 0, got {}",
                self.entropy_coeff
            )));
        }
        if !(0.0..=1.0).contains(&self.offline_lambda) {
            return Err(Error::Config(format!(
                "offline lambda must lie in [0, 1], got {}",
                self.offline_lambda
            )));
        }
        if self.num_critics == 0 {
            return Err(Error::Config("num_critics must be at least 1".into()));
        }
        Ok(())
    }
}
