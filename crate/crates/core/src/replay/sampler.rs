use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Location, TrajectoryBuffer};
use crate::{Error, Result};

/// Geometric time offsets `P(Δ = k) = (1 - γ) γ^(k-1)`, `k ≥ 1`.
///
/// An offset that runs past the end of the trajectory is redrawn up to
/// `max_rejections` times and then clamped to the final state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricSampler {
    pub gamma: f64,
    pub max_rejections: usize,
}

impl GeometricSampler {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!(
                "geometric discount must lie in [0, 1), got {gamma}"
            )));
        }
        Ok(GeometricSampler {
            gamma,
            max_rejections: 20,
        })
    }

    /// Untruncated draw by inversion.
    pub fn draw(&self, rng: &mut dyn RngCore) -> usize {
        let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
        if self.gamma <= 0.0 {
            return 1;
        }
        let k = (u.ln() / self.gamma.ln()).floor();
        if k >= (usize::MAX / 2) as f64 {
            usize::MAX / 2
        } else {
            1 + k as usize
        }
    }

    /// Offset no larger than `remaining` (the number of states after `t`).
    pub fn draw_within(&self, remaining: usize, rng: &mut dyn RngCore) -> usize {
        debug_assert!(remaining >= 1);
        for _ in 0..=self.max_rejections {
            let d = self.draw(rng);
            if d <= remaining {
                return d;
            }
        }
        remaining
    }
}

/// `(s_t, a_t)` rows with geometric-future positives (goal slice).
#[derive(Debug, Clone, PartialEq)]
pub struct NceBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub future_goals: Array2<f64>,
    pub locations: Vec<Location>,
    pub offsets: Vec<usize>,
}

impl NceBatch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

/// Consecutive `(s_t, a_t, s_{t+1})` rows with a random goal per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TdBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
    /// Goal slice of `s_{t+1}`.
    pub next_goals: Array2<f64>,
    pub goals: Array2<f64>,
    pub locations: Vec<Location>,
}

/// Rows whose positive is drawn from the mixture of the next state (weight
/// `(1-γ)/(2-γ)`) and the geometric future (weight `1/(2-γ)`).
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub positives: Array2<f64>,
    /// Per-row weight of the positive term; uniform ones when sampled.
    pub weights: Vec<f64>,
    pub from_next_state: Vec<bool>,
}

pub(crate) struct Rows {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
}

impl Rows {
    pub(crate) fn new_for(batch: usize, buffer: &TrajectoryBuffer) -> Self {
        let (_, t) = buffer.at(0);
        Rows {
            states: Array2::zeros((batch, t.observation_dim())),
            actions: Array2::zeros((batch, t.action_dim())),
        }
    }
}

fn check(buffer: &TrajectoryBuffer, batch_size: usize) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(())
}

/// Draws one `(s, a, s_f)` triplet; returns (deque index, t, Δ).
pub(crate) fn draw_triplet(
    buffer: &TrajectoryBuffer,
    sampler: &GeometricSampler,
    rng: &mut dyn RngCore,
) -> Result<(usize, usize, usize)> {
    let (idx, t) = buffer.sample_transition(rng)?;
    let remaining = buffer.at(idx).1.len() - 1 - t;
    let delta = sampler.draw_within(remaining, rng);
    Ok((idx, t, delta))
}

pub(crate) fn fill_triplet_row(
    buffer: &TrajectoryBuffer,
    row: usize,
    (idx, t, delta): (usize, usize, usize),
    rows: &mut Rows,
    goals: &mut Array2<f64>,
) -> Location {
    let (id, traj) = buffer.at(idx);
    let g = buffer.goal_dim();
    rows.states.row_mut(row).assign(&traj.state(t));
    rows.actions.row_mut(row).assign(&traj.action(t));
    goals
        .row_mut(row)
        .assign(&traj.state(t + delta).slice(ndarray::s![..g]));
    Location {
        trajectory_id: id,
        t,
    }
}

pub fn sample_nce_batch(
    buffer: &TrajectoryBuffer,
    sampler: &GeometricSampler,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<NceBatch> {
    check(buffer, batch_size)?;
    let mut rows = Rows::new_for(batch_size, buffer);
    let mut goals = Array2::zeros((batch_size, buffer.goal_dim()));
    let mut locations = Vec::with_capacity(batch_size);
    let mut offsets = Vec::with_capacity(batch_size);
    for row in 0..batch_size {
        let triplet = draw_triplet(buffer, sampler, rng)?;
        offsets.push(triplet.2);
        locations.push(fill_triplet_row(
            buffer, row, triplet, &mut rows, &mut goals,
        ));
    }
    Ok(NceBatch {
        states: rows.states,
        actions: rows.actions,
        future_goals: goals,
        locations,
        offsets,
    })
}

/// Goal slices of states drawn uniformly from the buffer.
pub fn sample_random_goals(
    buffer: &TrajectoryBuffer,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Array2<f64>> {
    check(buffer, n.max(1))?;
    let g = buffer.goal_dim();
    let mut out = Array2::zeros((n, g));
    for row in 0..n {
        let (idx, t) = buffer.sample_state(rng)?;
        out.row_mut(row)
            .assign(&buffer.at(idx).1.state(t).slice(ndarray::s![..g]));
    }
    Ok(out)
}

pub fn sample_td_batch(
    buffer: &TrajectoryBuffer,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<TdBatch> {
    check(buffer, batch_size)?;
    let g = buffer.goal_dim();
    let mut rows = Rows::new_for(batch_size, buffer);
    let mut next_states = Array2::zeros(rows.states.dim());
    let mut locations = Vec::with_capacity(batch_size);
    for row in 0..batch_size {
        let (idx, t) = buffer.sample_transition(rng)?;
        let (id, traj) = buffer.at(idx);
        rows.states.row_mut(row).assign(&traj.state(t));
        rows.actions.row_mut(row).assign(&traj.action(t));
        next_states.row_mut(row).assign(&traj.state(t + 1));
        locations.push(Location {
            trajectory_id: id,
            t,
        });
    }
    let goals = sample_random_goals(buffer, batch_size, rng)?;
    let next_goals = next_states.slice(ndarray::s![.., ..g]).to_owned();
    Ok(TdBatch {
        states: rows.states,
        actions: rows.actions,
        next_states,
        next_goals,
        goals,
        locations,
    })
}

/// Probability of the next-state branch of the positive mixture.
pub fn next_state_branch_probability(gamma: f64) -> f64 {
    (1.0 - gamma) / (2.0 - gamma)
}

pub fn sample_mixture_batch(
    buffer: &TrajectoryBuffer,
    sampler: &GeometricSampler,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<MixtureBatch> {
    check(buffer, batch_size)?;
    let p_next = next_state_branch_probability(sampler.gamma);
    let mut rows = Rows::new_for(batch_size, buffer);
    let mut positives = Array2::zeros((batch_size, buffer.goal_dim()));
    let mut from_next_state = Vec::with_capacity(batch_size);
    for row in 0..batch_size {
        let next = rng.random_bool(p_next);
        let (idx, t) = buffer.sample_transition(rng)?;
        let delta = if next {
            1
        } else {
            sampler.draw_within(buffer.at(idx).1.len() - 1 - t, rng)
        };
        fill_triplet_row(buffer, row, (idx, t, delta), &mut rows, &mut positives);
        from_next_state.push(next);
    }
    Ok(MixtureBatch {
        states: rows.states,
        actions: rows.actions,
        positives,
        weights: vec![1.0; batch_size],
        from_next_state,
    })
}

/// Where the actor's training goals come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GoalSource {
    /// States drawn uniformly from the buffer.
    Random,
    /// Geometric-future states of the batch rows' own `(s, a)`.
    Future,
    /// Per row: future with probability `p`, otherwise random.
    Mix(f64),
}

impl GoalSource {
    pub fn validate(&self) -> Result<()> {
        match self {
            GoalSource::Mix(p) if !(0.0..=1.0).contains(p) => Err(Error::Config(format!(
                "goal mix probability must lie in [0, 1], got {p}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for GoalSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GoalSource::Random => write!(f, "random"),
            GoalSource::Future => write!(f, "future"),
            GoalSource::Mix(p) => write!(f, "mix:{p}"),
        }
    }
}

impl FromStr for GoalSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let source = match s {
            "random" => GoalSource::Random,
            "future" => GoalSource::Future,
            other => {
                let p = other
                    .strip_prefix("mix:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown goal source `{other}`")))?;
                GoalSource::Mix(p)
            }
        };
        source.validate()?;
        Ok(source)
    }
}

impl TryFrom<String> for GoalSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GoalSource> for String {
    fn from(g: GoalSource) -> String {
        g.to_string()
    }
}

/// Goals for the actor loss, one per batch location.
pub fn sample_actor_goals(
    buffer: &TrajectoryBuffer,
    source: GoalSource,
    locations: &[Location],
    sampler: &GeometricSampler,
    rng: &mut dyn RngCore,
) -> Result<Array2<f64>> {
    source.validate()?;
    check(buffer, locations.len().max(1))?;
    let g = buffer.goal_dim();
    let first = buffer.first_id();
    let mut out = Array2::zeros((locations.len(), g));
    for (row, loc) in locations.iter().enumerate() {
        let future = match source {
            GoalSource::Random => false,
            GoalSource::Future => true,
            GoalSource::Mix(p) => rng.random_bool(p),
        };
        if future {
            let idx = loc
                .trajectory_id
                .checked_sub(first)
                .filter(|&i| (i as usize) < buffer.num_trajectories())
                .ok_or_else(|| {
                    Error::Trajectory(format!("trajectory {} was evicted", loc.trajectory_id))
                })? as usize;
            let traj = buffer.at(idx).1;
            let delta = sampler.draw_within(traj.len() - 1 - loc.t, rng);
            out.row_mut(row)
                .assign(&traj.state(loc.t + delta).slice(ndarray::s![..g]));
        } else {
            let (idx, t) = buffer.sample_state(rng)?;
            out.row_mut(row)
                .assign(&buffer.at(idx).1.state(t).slice(ndarray::s![..g]));
        }
    }
    Ok(out)
}
