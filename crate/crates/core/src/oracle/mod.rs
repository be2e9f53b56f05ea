//! Exact tabular ground truth: discounted occupancies, goal-conditioned
//! Q-functions, Bayes-optimal critics, Monte Carlo estimates and a greedy
//! policy-improvement audit.
//!
//! Occupancies count states from the next step onward:
//! `M(s, a, ·) = (1-γ) P(·|s, a) (I - γ P_π)⁻¹`.

mod audit;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::envs::{sample_categorical, TabularMdp};
use crate::{Error, Result};

pub use audit::{policy_improvement_audit, AuditReport, CriticSource};

const ROW_TOL: f64 = 1e-10;

/// Goal-conditioned tabular policy `π(a | s, g)`, stored as `(g, s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Array3<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array3<f64>) -> Result<Self> {
        for (idx, row) in probs.lanes(ndarray::Axis(2)).into_iter().enumerate() {
            let s: f64 = row.sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > ROW_TOL {
                return Err(Error::Oracle(format!(
                    "policy row {idx} is not a distribution (sum {s})"
                )));
            }
        }
        Ok(TabularPolicy { probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        TabularPolicy {
            probs: Array3::from_elem(
                (num_states, num_states, num_actions),
                1.0 / num_actions as f64,
            ),
        }
    }

    /// Independent Dirichlet(1) rows for every `(g, s)`.
    pub fn random(num_states: usize, num_actions: usize, rng: &mut dyn RngCore) -> Self {
        let mut probs = Array3::zeros((num_states, num_states, num_actions));
        for mut row in probs.lanes_mut(ndarray::Axis(2)) {
            row.iter_mut()
                .for_each(|p| *p = -(1.0 - rng.random::<f64>()).ln());
            let s = row.sum();
            row /= s;
        }
        TabularPolicy { probs }
    }

    /// The same Markov policy `(s, a)` for every goal.
    pub fn goal_independent(policy: &ArrayView2<'_, f64>, num_goals: usize) -> Result<Self> {
        let (ns, na) = policy.dim();
        Self::new(Array3::from_shape_fn((num_goals, ns, na), |(_, s, a)| {
            policy[[s, a]]
        }))
    }

    /// Deterministic policy from an `(s, g)` table of actions.
    pub fn deterministic(actions: &Array2<usize>, num_actions: usize) -> Self {
        let (ns, ng) = actions.dim();
        TabularPolicy {
            probs: Array3::from_shape_fn((ng, ns, num_actions), |(g, s, a)| {
                if actions[[s, g]] == a {
                    1.0
                } else {
                    0.0
                }
            }),
        }
    }

    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }

    pub fn num_goals(&self) -> usize {
        self.probs.dim().0
    }

    /// `π(· | ·, g)` as an `(s, a)` matrix.
    pub fn for_goal(&self, g: usize) -> ArrayView2<'_, f64> {
        self.probs.index_axis(ndarray::Axis(0), g)
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        let (ng, ns, na) = self.probs.dim();
        if ns != mdp.num_states() || na != mdp.num_actions() || ng != mdp.num_states() {
            return Err(Error::shape(
                "tabular policy",
                format!("({0}, {0}, {1})", mdp.num_states(), mdp.num_actions()),
                format!("{:?}", self.probs.dim()),
            ));
        }
        Ok(())
    }
}

/// `M(s, a, g)`: for each target `g`, the discounted occupancy of `g`
/// under the policy conditioned on `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    pub m: Array3<f64>,
    pub gamma: f64,
}

/// `Q_g(s, a)` stored as `(s, a, g)` under reward `r_g(s, a) = (1-γ) P(g | s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactQ {
    pub q: Array3<f64>,
    pub gamma: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Oracle(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    Ok(())
}

fn check_markov(mdp: &TabularMdp, policy: &ArrayView2<'_, f64>) -> Result<()> {
    if policy.dim() != (mdp.num_states(), mdp.num_actions()) {
        return Err(Error::shape(
            "markov policy",
            format!("({}, {})", mdp.num_states(), mdp.num_actions()),
            format!("{:?}", policy.dim()),
        ));
    }
    Ok(())
}

/// State-to-state transition matrix under a Markov policy `(s, a)`.
pub fn state_transition(mdp: &TabularMdp, policy: &ArrayView2<'_, f64>) -> DMatrix<f64> {
    let n = mdp.num_states();
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            let w = policy[[s, a]];
            if w == 0.0 {
                continue;
            }
            for (t, &pr) in mdp.row(s, a).iter().enumerate() {
                p[(s, t)] += w * pr;
            }
        }
    }
    p
}

/// `P(·|s, a)` stacked as an `(S·A, S)` matrix.
fn sa_transition(mdp: &TabularMdp) -> DMatrix<f64> {
    let (n, na) = (mdp.num_states(), mdp.num_actions());
    DMatrix::from_fn(n * na, n, |i, t| mdp.prob(i / na, i % na, t))
}

fn solve(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.lu()
        .solve(&b)
        .ok_or_else(|| Error::Oracle("singular linear system".into()))
}

/// `(I - γ P_π)⁻¹`.
fn resolvent(mdp: &TabularMdp, policy: &ArrayView2<'_, f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let n = mdp.num_states();
    let a = DMatrix::identity(n, n) - state_transition(mdp, policy) * gamma;
    solve(a, DMatrix::identity(n, n))
}

/// Full occupancy `(s, a, s_target)` under one Markov policy.
pub fn markov_occupancy(
    mdp: &TabularMdp,
    policy: &ArrayView2<'_, f64>,
    gamma: f64,
) -> Result<Array3<f64>> {
    check_gamma(gamma)?;
    check_markov(mdp, policy)?;
    let (n, na) = (mdp.num_states(), mdp.num_actions());
    let m = sa_transition(mdp) * resolvent(mdp, policy, gamma)? * (1.0 - gamma);
    Ok(Array3::from_shape_fn((n, na, n), |(s, a, t)| {
        m[(s * na + a, t)]
    }))
}

/// Truncated series `Σ_{j=1..J} (1-γ) γ^{j-1} P_sa P_π^{j-1}`.
pub fn power_series_occupancy(
    mdp: &TabularMdp,
    policy: &ArrayView2<'_, f64>,
    gamma: f64,
    terms: usize,
) -> Result<Array3<f64>> {
    check_gamma(gamma)?;
    check_markov(mdp, policy)?;
    let (n, na) = (mdp.num_states(), mdp.num_actions());
    let p_pi = state_transition(mdp, policy);
    let mut term = sa_transition(mdp) * (1.0 - gamma);
    let mut sum = DMatrix::zeros(n * na, n);
    for _ in 0..terms {
        sum += &term;
        term = (&term * &p_pi) * gamma;
    }
    Ok(Array3::from_shape_fn((n, na, n), |(s, a, t)| {
        sum[(s * na + a, t)]
    }))
}

/// Goal-conditioned occupancy: slice `g` uses `π(·|·, g)`.
pub fn exact_occupancy(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    gamma: f64,
) -> Result<OccupancyTable> {
    policy.check(mdp)?;
    let (n, na) = (mdp.num_states(), mdp.num_actions());
    let mut m = Array3::zeros((n, na, n));
    for g in 0..n {
        let full = markov_occupancy(mdp, &policy.for_goal(g), gamma)?;
        for s in 0..n {
            for a in 0..na {
                m[[s, a, g]] = full[[s, a, g]];
            }
        }
    }
    Ok(OccupancyTable { m, gamma })
}

/// Bellman evaluation on `(s, a)` pairs, one linear solve per goal:
/// `Q = r_g + γ P_sa Π_g Q`.
pub fn exact_q(mdp: &TabularMdp, policy: &TabularPolicy, gamma: f64) -> Result<ExactQ> {
    check_gamma(gamma)?;
    policy.check(mdp)?;
    let (n, na) = (mdp.num_states(), mdp.num_actions());
    let sa = n * na;
    let mut q = Array3::zeros((n, na, n));
    for g in 0..n {
        let pi = policy.for_goal(g);
        let mut a = DMatrix::identity(sa, sa);
        let mut r = DMatrix::zeros(sa, 1);
        for s in 0..n {
            for act in 0..na {
                let i = s * na + act;
                r[(i, 0)] = (1.0 - gamma) * mdp.prob(s, act, g);
                for (t, &p) in mdp.row(s, act).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for a2 in 0..na {
                        a[(i, t * na + a2)] -= gamma * p * pi[[t, a2]];
                    }
                }
            }
        }
        let x = solve(a, r)?;
        for s in 0..n {
            for act in 0..na {
                q[[s, act, g]] = x[(s * na + act, 0)];
            }
        }
    }
    Ok(ExactQ { q, gamma })
}

/// State values `V_g(s) = Σ_a π(a|s,g) Q_g(s, a)`, stored `(g, s)`.
pub fn state_values(q: &ExactQ, policy: &TabularPolicy) -> Array2<f64> {
    let (n, na, ng) = q.q.dim();
    Array2::from_shape_fn((ng, n), |(g, s)| {
        (0..na)
            .map(|a| policy.probs[[g, s, a]] * q.q[[s, a, g]])
            .sum()
    })
}

/// Empirical `M(s, a, ·)` under one Markov policy: per `(s, a)`, take `a`
/// in `s`, draw `Δ ≥ 1` with `P(Δ) = (1-γ) γ^{Δ-1}` exactly (no horizon
/// truncation), and record `s_Δ`.
pub fn monte_carlo_occupancy(
    mdp: &TabularMdp,
    policy: &ArrayView2<'_, f64>,
    gamma: f64,
    rollouts_per_pair: usize,
    rng: &mut dyn RngCore,
) -> Result<Array3<f64>> {
    check_gamma(gamma)?;
    check_markov(mdp, policy)?;
    if rollouts_per_pair == 0 {
        return Err(Error::Oracle("need at least one rollout".into()));
    }
    let (n, na) = (mdp.num_states(), mdp.num_actions());
    let mut counts = Array3::<f64>::zeros((n, na, n));
    for s in 0..n {
        for a in 0..na {
            for _ in 0..rollouts_per_pair {
                let mut state = mdp.sample_next(s, a, rng);
                while rng.random::<f64>() < gamma {
                    let act = sample_categorical(policy.row(state).as_slice().expect("row"), rng);
                    state = mdp.sample_next(state, act, rng);
                }
                counts[[s, a, state]] += 1.0;
            }
        }
    }
    Ok(counts / rollouts_per_pair as f64)
}

/// `f*(s, a, g) = ln(M(s, a, g) / p_marg(g))`; `M = 0` maps to `-∞`.
pub fn bayes_optimal_critic(table: &OccupancyTable, p_marg: &[f64]) -> Result<Array3<f64>> {
    let (n, na, ng) = table.m.dim();
    if p_marg.len() != ng {
        return Err(Error::shape("negative marginal", ng, p_marg.len()));
    }
    if let Some(g) = p_marg.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::Oracle(format!(
            "negative marginal is zero at goal {g}"
        )));
    }
    Ok(Array3::from_shape_fn((n, na, ng), |(s, a, g)| {
        let m = table.m[[s, a, g]];
        if m > 0.0 {
            (m / p_marg[g]).ln()
        } else {
            f64::NEG_INFINITY
        }
    }))
}

/// Greedy deterministic policy `argmax_a table(s, a, g)`, lowest index on ties.
pub fn greedy_policy(table: &Array3<f64>) -> TabularPolicy {
    let (n, na, ng) = table.dim();
    let actions = Array2::from_shape_fn((n, ng), |(s, g)| {
        (1..na).fold(0, |best, a| {
            if table[[s, a, g]] > table[[s, best, g]] {
                a
            } else {
                best
            }
        })
    });
    TabularPolicy::deterministic(&actions, na)
}

/// Discounted state visitation from the initial distribution, counting
/// `t = 0`: `(1-γ) p0ᵀ (I - γ P_π)⁻¹`.
pub fn discounted_visitation(
    mdp: &TabularMdp,
    policy: &ArrayView2<'_, f64>,
    gamma: f64,
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    check_markov(mdp, policy)?;
    let r = resolvent(mdp, policy, gamma)?;
    let n = mdp.num_states();
    Ok((0..n)
        .map(|t| (1.0 - gamma) * (0..n).map(|s| mdp.initial()[s] * r[(s, t)]).sum::<f64>())
        .collect())
}

/// Probability that a rollout of `horizon` steps from `start` under a Markov
/// policy visits `goal` at any step, including step 0.
pub fn reach_probability(
    mdp: &TabularMdp,
    policy: &ArrayView2<'_, f64>,
    start: &[f64],
    goal: usize,
    horizon: usize,
) -> Result<f64> {
    check_markov(mdp, policy)?;
    let n = mdp.num_states();
    if start.len() != n || goal >= n {
        return Err(Error::shape("reach_probability", n, start.len()));
    }
    let p = state_transition(mdp, policy);
    let mut mass: Vec<f64> = start.to_vec();
    let mut hit = mass[goal];
    mass[goal] = 0.0;
    for _ in 0..horizon {
        let mut next = vec![0.0; n];
        for s in 0..n {
            if mass[s] == 0.0 {
                continue;
            }
            for t in 0..n {
                next[t] += mass[s] * p[(s, t)];
            }
        }
        hit += next[goal];
        next[goal] = 0.0;
        mass = next;
    }
    Ok(hit)
}

/// Serializable summary of `oracle-check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl IdentityCheck {
    pub fn new(name: &str, max_abs_error: f64, tolerance: f64) -> Self {
        IdentityCheck {
            name: name.to_string(),
            max_abs_error,
            tolerance,
            passed: max_abs_error <= tolerance,
        }
    }
}

pub fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Prop-1, power-series, row-sum and log-ratio identities on one MDP.
pub fn identity_checks(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    gamma: f64,
) -> Result<Vec<IdentityCheck>> {
    let occ = exact_occupancy(mdp, policy, gamma)?;
    let q = exact_q(mdp, policy, gamma)?;
    let n = mdp.num_states();
    let mut out = vec![IdentityCheck::new(
        "occupancy_equals_q",
        max_abs_diff(&occ.m, &q.q),
        1e-10,
    )];
    let pi0 = policy.for_goal(0);
    let full = markov_occupancy(mdp, &pi0, gamma)?;
    let row_err = full
        .lanes(ndarray::Axis(2))
        .into_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    out.push(IdentityCheck::new(
        "occupancy_rows_sum_to_one",
        row_err,
        1e-10,
    ));
    let terms = if gamma < 0.999 {
        ((1e-16f64).ln() / gamma.max(1e-3).ln()).ceil() as usize + 10
    } else {
        50_000
    };
    let series = power_series_occupancy(mdp, &pi0, gamma, terms.max(1))?;
    out.push(IdentityCheck::new(
        "solve_equals_power_series",
        max_abs_diff(&full, &series),
        1e-10,
    ));
    let p_marg = vec![1.0 / n as f64; n];
    let f = bayes_optimal_critic(&occ, &p_marg)?;
    let implied = Array3::from_shape_fn(f.dim(), |(s, a, g)| f[[s, a, g]].exp() * p_marg[g]);
    out.push(IdentityCheck::new(
        "exp_critic_times_marginal_equals_q",
        max_abs_diff(&implied, &q.q),
        1e-10,
    ));
    Ok(out)
}
