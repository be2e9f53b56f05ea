use std::collections::VecDeque;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, RngCore};

use crate::{Error, Result};

/// One episode: `states[0..T]`, `actions[0..T-1]` where `actions[i]` was
/// taken in `states[i]` and led to `states[i + 1]`, and the goal that was
/// commanded while it was collected.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Array2<f64>,
    actions: Array2<f64>,
    commanded_goal: Vec<f64>,
}

impl Trajectory {
    pub fn new(
        states: Array2<f64>,
        actions: Array2<f64>,
        commanded_goal: Vec<f64>,
    ) -> Result<Self> {
        if states.nrows() < 2 {
            return Err(Error::Trajectory(format!(
                "needs at least 2 states, got {}",
                states.nrows()
            )));
        }
        if actions.nrows() != states.nrows() - 1 {
            return Err(Error::Trajectory(format!(
                "{} states need {} actions, got {}",
                states.nrows(),
                states.nrows() - 1,
                actions.nrows()
            )));
        }
        let finite = states
            .iter()
            .chain(actions.iter())
            .chain(&commanded_goal)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Trajectory("non-finite entry".into()));
        }
        Ok(Trajectory {
            states,
            actions,
            commanded_goal,
        })
    }

    /// Number of states.
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_transitions(&self) -> usize {
        self.states.nrows() - 1
    }

    pub fn states(&self) -> &Array2<f64> {
        &self.states
    }

    pub fn actions(&self) -> &Array2<f64> {
        &self.actions
    }

    pub fn state(&self, i: usize) -> ArrayView1<'_, f64> {
        self.states.row(i)
    }

    pub fn action(&self, i: usize) -> ArrayView1<'_, f64> {
        self.actions.row(i)
    }

    pub fn commanded_goal(&self) -> &[f64] {
        &self.commanded_goal
    }

    pub fn observation_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }
}

/// Position of a transition: trajectory id (stable across evictions) and
/// the time index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Location {
    pub trajectory_id: u64,
    pub t: usize,
}

/// FIFO store of whole trajectories bounded by a transition count.
#[derive(Debug, Clone)]
pub struct TrajectoryBuffer {
    trajectories: VecDeque<(u64, Trajectory)>,
    capacity_transitions: usize,
    goal_dim: usize,
    total_transitions: usize,
    total_states: usize,
    next_id: u64,
    /// Prefix sums of transitions per stored trajectory (len = n + 1).
    transition_offsets: Vec<usize>,
    state_offsets: Vec<usize>,
}

impl TrajectoryBuffer {
    pub fn new(capacity_transitions: usize, goal_dim: usize) -> Result<Self> {
        if capacity_transitions == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(TrajectoryBuffer {
            trajectories: VecDeque::new(),
            capacity_transitions,
            goal_dim,
            total_transitions: 0,
            total_states: 0,
            next_id: 0,
            transition_offsets: vec![0],
            state_offsets: vec![0],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity_transitions
    }

    pub fn goal_dim(&self) -> usize {
        self.goal_dim
    }

    pub fn num_transitions(&self) -> usize {
        self.total_transitions
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Id that the next inserted trajectory will receive.
    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &Trajectory)> {
        self.trajectories.iter().map(|(id, t)| (*id, t))
    }

    pub fn get(&self, id: u64) -> Option<&Trajectory> {
        let first = self.trajectories.front()?.0;
        let idx = id.checked_sub(first)? as usize;
        self.trajectories.get(idx).map(|(_, t)| t)
    }

    /// Stores a trajectory, evicting the oldest ones until it fits.
    pub fn insert(&mut self, trajectory: Trajectory) -> Result<u64> {
        let n = trajectory.num_transitions();
        if n > self.capacity_transitions {
            return Err(Error::Trajectory(format!(
                "{n} transitions exceed the buffer capacity {}",
                self.capacity_transitions
            )));
        }
        if trajectory.observation_dim() < self.goal_dim {
            return Err(Error::shape(
                "trajectory observation",
                self.goal_dim,
                trajectory.observation_dim(),
            ));
        }
        if let Some((_, first)) = self.trajectories.front() {
            if first.observation_dim() != trajectory.observation_dim()
                || first.action_dim() != trajectory.action_dim()
            {
                return Err(Error::shape(
                    "trajectory dims",
                    format!("{:?}", (first.observation_dim(), first.action_dim())),
                    format!(
                        "{:?}",
                        (trajectory.observation_dim(), trajectory.action_dim())
                    ),
                ));
            }
        }
        while self.total_transitions + n > self.capacity_transitions {
            let (_, old) = self
                .trajectories
                .pop_front()
                .expect("non-empty while over capacity");
            self.total_transitions -= old.num_transitions();
            self.total_states -= old.len();
        }
        let id = self.next_id;
        self.next_id += 1;
        self.total_transitions += n;
        self.total_states += trajectory.len();
        self.trajectories.push_back((id, trajectory));
        self.rebuild_offsets();
        Ok(id)
    }

    /// Restores a buffer exactly, including trajectory ids.
    pub fn from_parts(
        capacity: usize,
        goal_dim: usize,
        first_id: u64,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        let mut buffer = TrajectoryBuffer::new(capacity, goal_dim)?;
        buffer.next_id = first_id;
        for t in trajectories {
            buffer.insert(t)?;
        }
        Ok(buffer)
    }

    pub fn first_id(&self) -> u64 {
        self.trajectories
            .front()
            .map_or(self.next_id, |(id, _)| *id)
    }

    fn rebuild_offsets(&mut self) {
        self.transition_offsets.clear();
        self.state_offsets.clear();
        let (mut a, mut b) = (0, 0);
        self.transition_offsets.push(0);
        self.state_offsets.push(0);
        for (_, t) in &self.trajectories {
            a += t.num_transitions();
            b += t.len();
            self.transition_offsets.push(a);
            self.state_offsets.push(b);
        }
    }

    fn locate(offsets: &[usize], flat: usize) -> (usize, usize) {
        // index of the last offset <= flat
        let idx = offsets.partition_point(|&o| o <= flat) - 1;
        (idx, flat - offsets[idx])
    }

    /// Uniform draw over stored transitions.
    pub fn sample_transition(&self, rng: &mut dyn RngCore) -> Result<(usize, usize)> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let flat = rng.random_range(0..self.total_transitions);
        Ok(Self::locate(&self.transition_offsets, flat))
    }

    /// Uniform draw over stored states (including final states).
    pub fn sample_state(&self, rng: &mut dyn RngCore) -> Result<(usize, usize)> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let flat = rng.random_range(0..self.total_states);
        Ok(Self::locate(&self.state_offsets, flat))
    }

    /// Trajectory by deque position (as returned by the samplers).
    pub fn at(&self, index: usize) -> (u64, &Trajectory) {
        let (id, t) = &self.trajectories[index];
        (*id, t)
    }
}
