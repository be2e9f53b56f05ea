use ndarray::{Array2, ArrayView2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::sampler::{draw_triplet, fill_triplet_row, Rows};
use super::{GeometricSampler, NceBatch, Trajectory, TrajectoryBuffer};
use crate::{Error, Result};

/// Log-likelihood of actions under a goal-conditioned policy, one value per row.
pub trait GoalConditionedLikelihood {
    fn log_likelihood(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Threshold on `|R - 1|`; `f64::INFINITY` keeps everything.
    pub epsilon: f64,
    pub enabled: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            epsilon: f64::INFINITY,
            enabled: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "filter epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn is_noop(&self) -> bool {
        !self.enabled || self.epsilon == f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Exclude,
    /// The reached-goal likelihood is zero; the example is excluded.
    ZeroDenominator,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub kept: u64,
    pub excluded: u64,
    pub zero_denominator: u64,
}

impl FilterStats {
    fn record(&mut self, d: FilterDecision) {
        match d {
            FilterDecision::Keep => self.kept += 1,
            FilterDecision::Exclude => self.excluded += 1,
            FilterDecision::ZeroDenominator => {
                self.excluded += 1;
                self.zero_denominator += 1
            }
        }
    }
}

/// Relabeling filter for the segment `states[t..t+Δ]`, `actions[t..t+Δ]`.
///
/// `R = Π π(a_i | s_i, commanded) / Π π(a_i | s_i, reached)`; dynamics
/// factors are identical in both products and cancel. Keep iff `|R - 1| ≤ ε`.
pub fn filter_predicate(
    segment_states: &ArrayView2<'_, f64>,
    segment_actions: &ArrayView2<'_, f64>,
    policy: &dyn GoalConditionedLikelihood,
    commanded_goal: &[f64],
    reached_goal: &[f64],
    epsilon: f64,
) -> Result<FilterDecision> {
    if epsilon == f64::INFINITY {
        return Ok(FilterDecision::Keep);
    }
    let n = segment_states.nrows();
    if segment_actions.nrows() != n || n == 0 {
        return Err(Error::shape("filter segment", n, segment_actions.nrows()));
    }
    if commanded_goal == reached_goal {
        return Ok(FilterDecision::Keep);
    }
    let tile = |g: &[f64]| Array2::from_shape_fn((n, g.len()), |(_, j)| g[j]);
    let numerator: f64 = policy
        .log_likelihood(
            segment_states,
            &tile(commanded_goal).view(),
            segment_actions,
        )?
        .iter()
        .sum();
    let denominator: f64 = policy
        .log_likelihood(segment_states, &tile(reached_goal).view(), segment_actions)?
        .iter()
        .sum();
    if denominator == f64::NEG_INFINITY {
        return Ok(FilterDecision::ZeroDenominator);
    }
    let ratio = (numerator - denominator).exp();
    Ok(if (ratio - 1.0).abs() <= epsilon {
        FilterDecision::Keep
    } else {
        FilterDecision::Exclude
    })
}

fn decide(
    traj: &Trajectory,
    t: usize,
    delta: usize,
    goal_dim: usize,
    policy: &dyn GoalConditionedLikelihood,
    epsilon: f64,
) -> Result<FilterDecision> {
    let states = traj.states().slice(ndarray::s![t..t + delta, ..]);
    let actions = traj.actions().slice(ndarray::s![t..t + delta, ..]);
    let reached = traj
        .state(t + delta)
        .slice(ndarray::s![..goal_dim])
        .to_vec();
    filter_predicate(
        &states,
        &actions,
        policy,
        traj.commanded_goal(),
        &reached,
        epsilon,
    )
}

/// [`super::sample_nce_batch`] with excluded triplets redrawn. A disabled
/// filter or `ε = ∞` delegates to the unfiltered sampler unchanged.
pub fn sample_nce_batch_filtered(
    buffer: &TrajectoryBuffer,
    sampler: &GeometricSampler,
    batch_size: usize,
    filter: &FilterConfig,
    policy: &dyn GoalConditionedLikelihood,
    stats: &mut FilterStats,
    rng: &mut dyn RngCore,
) -> Result<NceBatch> {
    filter.validate()?;
    if filter.is_noop() {
        let batch = super::sample_nce_batch(buffer, sampler, batch_size, rng)?;
        stats.kept += batch_size as u64;
        return Ok(batch);
    }
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let max_attempts = 1000 * batch_size.max(1);
    let mut rows = Rows::new_for(batch_size, buffer);
    let mut goals = Array2::zeros((batch_size, buffer.goal_dim()));
    let mut locations = Vec::with_capacity(batch_size);
    let mut offsets = Vec::with_capacity(batch_size);
    let mut attempts = 0;
    while locations.len() < batch_size {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "relabeling filter with epsilon {} rejected {max_attempts} draws",
                filter.epsilon
            )));
        }
        let triplet = draw_triplet(buffer, sampler, rng)?;
        let (idx, t, delta) = triplet;
        let decision = decide(
            buffer.at(idx).1,
            t,
            delta,
            buffer.goal_dim(),
            policy,
            filter.epsilon,
        )?;
        stats.record(decision);
        if decision == FilterDecision::Keep {
            let row = locations.len();
            offsets.push(delta);
            locations.push(fill_triplet_row(
                buffer, row, triplet, &mut rows, &mut goals,
            ));
        }
    }
    Ok(NceBatch {
        states: rows.states,
        actions: rows.actions,
        future_goals: goals,
        locations,
        offsets,
    })
}

/// Decision for every `(t, Δ)` pair of every stored trajectory; used to
/// audit how the kept fraction moves with `ε`.
pub fn count_kept(
    buffer: &TrajectoryBuffer,
    policy: &dyn GoalConditionedLikelihood,
    epsilon: f64,
) -> Result<FilterStats> {
    let mut stats = FilterStats::default();
    for (_, traj) in buffer.iter() {
        for t in 0..traj.num_transitions() {
            for delta in 1..traj.len() - t {
                stats.record(decide(traj, t, delta, buffer.goal_dim(), policy, epsilon)?);
            }
        }
    }
    Ok(stats)
}
