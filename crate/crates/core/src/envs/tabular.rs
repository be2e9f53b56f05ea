use rand::{Rng, RngCore};

use super::{Action, ActionSpace, EnvSnapshot, EnvSpec, Environment, MazeLayout, Step};
use crate::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// Finite MDP with transition tensor `P[s][a][s']`, initial distribution,
/// goal distribution and discount.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    initial: Vec<f64>,
    goal_distribution: Vec<f64>,
    gamma: f64,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::Config(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        initial: Vec<f64>,
        goal_distribution: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Config(
                "tabular MDP needs at least one state and action".into(),
            ));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!(
                "discount must lie in (0, 1), got {gamma}"
            )));
        }
        if transition.len() != num_states * num_actions * num_states {
            return Err(Error::shape(
                "transition tensor",
                num_states * num_actions * num_states,
                transition.len(),
            ));
        }
        if initial.len() != num_states || goal_distribution.len() != num_states {
            return Err(Error::shape(
                "state distribution",
                num_states,
                initial.len(),
            ));
        }
        for (i, row) in transition.chunks(num_states).enumerate() {
            check_distribution(row, &format!("P[{}][{}]", i / num_actions, i % num_actions))?;
        }
        check_distribution(&initial, "initial distribution")?;
        check_distribution(&goal_distribution, "goal distribution")?;
        Ok(TabularMdp {
            num_states,
            num_actions,
            transition,
            initial,
            goal_distribution,
            gamma,
        })
    }

    /// Random MDP with Dirichlet(1) transition rows and initial distribution
    /// and a uniform goal distribution.
    pub fn random(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let mut dirichlet = |n: usize| {
            let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let transition = (0..num_states * num_actions)
            .flat_map(|_| dirichlet(num_states))
            .collect();
        let initial = dirichlet(num_states);
        let goal = vec![1.0 / num_states as f64; num_states];
        TabularMdp::new(num_states, num_actions, transition, initial, goal, gamma)
    }

    /// Deterministic chain: action 0 stays, action 1 advances; the last state absorbs.
    pub fn chain(num_states: usize, gamma: f64) -> Result<Self> {
        let mut t = vec![0.0; num_states * 2 * num_states];
        for s in 0..num_states {
            t[(s * 2) * num_states + s] = 1.0;
            t[(s * 2 + 1) * num_states + (s + 1).min(num_states - 1)] = 1.0;
        }
        let mut initial = vec![0.0; num_states];
        initial[0] = 1.0;
        let goal = vec![1.0 / num_states as f64; num_states];
        TabularMdp::new(num_states, 2, t, initial, goal, gamma)
    }

    /// Grid surrogate of a maze: one state per free cell (row-major), five
    /// deterministic actions (stay, up, down, left, right); blocked moves stay.
    pub fn from_maze(layout: &MazeLayout, gamma: f64) -> Result<Self> {
        let cells = layout.free_cells();
        let index = |r: usize, c: usize| cells.iter().position(|&x| x == (r, c));
        let n = cells.len();
        let moves: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];
        let mut t = vec![0.0; n * 5 * n];
        for (s, &(r, c)) in cells.iter().enumerate() {
            for (a, (dr, dc)) in moves.iter().enumerate() {
                let nr = r as isize + dr;
                let nc = c as isize + dc;
                let next = if layout.is_free(nr, nc) {
                    index(nr as usize, nc as usize).expect("free cell indexed")
                } else {
                    s
                };
                t[(s * 5 + a) * n + next] = 1.0;
            }
        }
        let starts = layout.start_cells();
        let mut initial = vec![0.0; n];
        for &(r, c) in &starts {
            initial[index(r, c).expect("start is free")] = 1.0 / starts.len() as f64;
        }
        TabularMdp::new(n, 5, t, initial, vec![1.0 / n as f64; n], gamma)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!(
                "discount must lie in (0, 1), got {gamma}"
            )));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn with_initial(mut self, initial: Vec<f64>) -> Result<Self> {
        check_distribution(&initial, "initial distribution")?;
        if initial.len() != self.num_states {
            return Err(Error::shape(
                "initial distribution",
                self.num_states,
                initial.len(),
            ));
        }
        self.initial = initial;
        Ok(self)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn goal_distribution(&self) -> &[f64] {
        &self.goal_distribution
    }

    /// `P[s][a][·]`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)[next]
    }

    pub fn sample_next(&self, s: usize, a: usize, rng: &mut dyn RngCore) -> usize {
        sample_categorical(self.row(s, a), rng)
    }

    pub fn sample_initial(&self, rng: &mut dyn RngCore) -> usize {
        sample_categorical(&self.initial, rng)
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the final partial sum
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Episodic simulator over a [`TabularMdp`]. Observations and goals are
/// one-hot state vectors; success means an exact state match.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: TabularMdp,
    spec: EnvSpec,
    state: usize,
    goal: Vec<f64>,
    steps: usize,
    done: bool,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, max_episode_steps: usize) -> Result<Self> {
        if max_episode_steps == 0 {
            return Err(Error::Config("max_episode_steps must be positive".into()));
        }
        let n = mdp.num_states();
        let spec = EnvSpec {
            observation_dim: n,
            goal_dim: n,
            action: ActionSpace::Discrete(mdp.num_actions()),
            success_radius: 0.0,
            max_episode_steps,
        };
        Ok(TabularEnv {
            mdp,
            spec,
            state: 0,
            goal: vec![0.0; n],
            steps: 0,
            done: true,
        })
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn observation_of(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.mdp.num_states()];
        v[s] = 1.0;
        v
    }

    /// State index of a one-hot vector.
    pub fn state_of(&self, one_hot: &[f64]) -> Result<usize> {
        let n = self.mdp.num_states();
        if one_hot.len() != n {
            return Err(Error::shape("tabular state", n, one_hot.len()));
        }
        let ones: Vec<usize> = (0..n).filter(|&i| one_hot[i] == 1.0).collect();
        if ones.len() != 1 || one_hot.iter().filter(|&&v| v != 0.0).count() != 1 {
            return Err(Error::Env("tabular goal must be a one-hot state".into()));
        }
        Ok(ones[0])
    }
}

impl Environment for TabularEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, goal: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.state_of(goal)?;
        self.goal = goal.to_vec();
        self.state = self.mdp.sample_initial(rng);
        self.steps = 0;
        self.done = false;
        Ok(self.observation_of(self.state))
    }

    fn step(&mut self, action: &Action, rng: &mut dyn RngCore) -> Result<Step> {
        if self.done {
            return Err(Error::Env("step called on a finished episode".into()));
        }
        let a = match action {
            Action::Discrete(a) if *a < self.mdp.num_actions() => *a,
            other => return Err(Error::Env(format!("invalid tabular action {other:?}"))),
        };
        self.state = self.mdp.sample_next(self.state, a, rng);
        self.steps += 1;
        self.done = self.steps >= self.spec.max_episode_steps;
        Ok(Step {
            observation: self.observation_of(self.state),
            done: self.done,
        })
    }

    fn sample_goal(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.observation_of(sample_categorical(self.mdp.goal_distribution(), rng))
    }

    fn goal(&self) -> &[f64] {
        &self.goal
    }

    fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            values: vec![self.state as f64],
            goal: self.goal.clone(),
            steps: self.steps,
            done: self.done,
        }
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        let s = snapshot.values.first().copied().unwrap_or(-1.0);
        if snapshot.values.len() != 1 || s < 0.0 || s as usize >= self.mdp.num_states() {
            return Err(Error::Env(
                "snapshot does not describe a tabular state".into(),
            ));
        }
        self.state = s as usize;
        self.goal = snapshot.goal.clone();
        self.steps = snapshot.steps;
        self.done = snapshot.done;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{rng_stream, Streams};

    /// Sum over categories of squared z-scores must stay within a loose
    /// chi-square bound, and every category within 3 (Bonferroni 4) sigma.
    fn assert_multinomial(counts: &[usize], probs: &[f64], n: usize) {
        for (&c, &p) in counts.iter().zip(probs) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            let z = (c as f64 - n as f64 * p).abs() / sd.max(1e-12);
            assert!(
                p == 0.0 && c == 0 || z < 4.0,
                "count {c} vs expected {} (z = {z})",
                n as f64 * p
            );
        }
    }

    #[test]
    fn rejects_bad_rows() {
        let r = TabularMdp::new(
            2,
            1,
            vec![0.5, 0.6, 1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.5, 0.5],
            0.9,
        );
        assert!(r.is_err());
        let r = TabularMdp::new(
            2,
            1,
            vec![1.5, -0.5, 1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.5, 0.5],
            0.9,
        );
        assert!(r.is_err());
    }

    #[test]
    fn deterministic_start() {
        let env_mdp = TabularMdp::chain(4, 0.9).unwrap();
        let mut env = TabularEnv::new(env_mdp, 5).unwrap();
        let mut rng = rng_stream(1, Streams::Env);
        let goal = env.observation_of(3);
        for _ in 0..20 {
            assert_eq!(env.reset(&goal, &mut rng).unwrap(), env.observation_of(0));
        }
    }

    #[test]
    fn chain_advance() {
        let mut env = TabularEnv::new(TabularMdp::chain(2, 0.9).unwrap(), 3).unwrap();
        let mut rng = rng_stream(1, Streams::Env);
        let goal = env.observation_of(1);
        env.reset(&goal, &mut rng).unwrap();
        let step = env.step(&Action::Discrete(1), &mut rng).unwrap();
        assert_eq!(step.observation, vec![0.0, 1.0]);
        assert!(!step.done);
    }

    #[test]
    fn fixed_horizon_and_step_after_done() {
        let mut env = TabularEnv::new(TabularMdp::chain(3, 0.9).unwrap(), 2).unwrap();
        let mut rng = rng_stream(2, Streams::Env);
        let goal = env.observation_of(1);
        env.reset(&goal, &mut rng).unwrap();
        // reaching the goal does not end the episode
        assert!(!env.step(&Action::Discrete(1), &mut rng).unwrap().done);
        assert!(env.step(&Action::Discrete(1), &mut rng).unwrap().done);
        assert!(env.step(&Action::Discrete(0), &mut rng).is_err());
    }

    #[test]
    fn non_one_hot_goal_rejected() {
        let mut env = TabularEnv::new(TabularMdp::chain(3, 0.9).unwrap(), 2).unwrap();
        let mut rng = rng_stream(2, Streams::Env);
        assert!(env.reset(&[0.5, 0.5, 0.0], &mut rng).is_err());
    }

    #[test]
    fn reset_frequencies_match_initial_distribution() {
        let mdp = TabularMdp::chain(3, 0.9)
            .unwrap()
            .with_initial(vec![0.2, 0.5, 0.3])
            .unwrap();
        let mut env = TabularEnv::new(mdp, 4).unwrap();
        let mut rng = rng_stream(3, Streams::Env);
        let goal = env.observation_of(0);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let obs = env.reset(&goal, &mut rng).unwrap();
            counts[env.state_of(&obs).unwrap()] += 1;
        }
        assert_multinomial(&counts, &[0.2, 0.5, 0.3], n);
    }

    #[test]
    fn transition_frequencies_match_row() {
        let mut rng = rng_stream(4, Streams::Env);
        let mdp = TabularMdp::random(5, 2, 0.9, &mut rng).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[mdp.sample_next(2, 1, &mut rng)] += 1;
        }
        assert_multinomial(&counts, mdp.row(2, 1), n);
    }

    #[test]
    fn maze_surrogate_moves() {
        let layout = MazeLayout::parse("..\n#.\n").unwrap();
        let mdp = TabularMdp::from_maze(&layout, 0.9).unwrap();
        assert_eq!(mdp.num_states(), 3);
        // state 0 = (0,0); right -> (0,1) = state 1; down is a wall -> stay
        assert_eq!(mdp.prob(0, 4, 1), 1.0);
        assert_eq!(mdp.prob(0, 2, 0), 1.0);
        assert_eq!(mdp.prob(1, 2, 2), 1.0);
    }
}
