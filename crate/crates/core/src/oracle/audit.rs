use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    bayes_optimal_critic, discounted_visitation, exact_occupancy, exact_q, greedy_policy,
    state_values, TabularPolicy,
};
use crate::envs::TabularMdp;
use crate::Result;

/// Numerical allowance on "improvement ≥ bound".
pub const AUDIT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticSource {
    /// One critic for the goal-averaged policy `π̄(a|s) = Σ_g p(g|s) π(a|s,g)`,
    /// with `p(g|s) ∝ p_g(g) d_g(s)` and `d_g` the discounted visitation of `π_g`.
    AveragedPolicy,
    /// The exact critic of each `π_g` (the `ε = 0` case).
    PerGoal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub source: CriticSource,
    pub gamma: f64,
    /// `max_{s,g} |V^{π̄}_g(s) - V^{π_g}_g(s)|`; zero for per-goal critics.
    pub epsilon_hat: f64,
    /// `2 γ ε̂ / (1 - γ)`.
    pub slack: f64,
    /// Per goal, `return(π') - return(π)` from the initial distribution.
    pub improvement_from_start: Vec<f64>,
    /// Per goal, `min_s V^{π'}_g(s) - V^{π_g}_g(s)`.
    pub min_pointwise_improvement: Vec<f64>,
    /// Smallest pointwise improvement over goals with `p_g(g) > 0`.
    pub worst_improvement: f64,
    pub passed: bool,
}

fn averaged_policy(mdp: &TabularMdp, old: &TabularPolicy, gamma: f64) -> Result<Array2<f64>> {
    let (n, na) = (mdp.num_states(), mdp.num_actions());
    let pg = mdp.goal_distribution();
    let mut weight = Array2::<f64>::zeros((n, n));
    for g in 0..n {
        if pg[g] == 0.0 {
            continue;
        }
        let d = discounted_visitation(mdp, &old.for_goal(g), gamma)?;
        for s in 0..n {
            weight[[g, s]] = pg[g] * d[s];
        }
    }
    let mut avg = Array2::zeros((n, na));
    for s in 0..n {
        let total: f64 = weight.column(s).sum();
        for g in 0..n {
            // States no goal's policy visits fall back to the goal prior.
            let w = if total > 0.0 {
                weight[[g, s]] / total
            } else {
                pg[g]
            };
            for a in 0..na {
                avg[[s, a]] += w * old.probs()[[g, s, a]];
            }
        }
    }
    Ok(avg)
}

/// Greedy improvement step from a Bayes-optimal critic, audited against the
/// exact returns of the old and new policies.
pub fn policy_improvement_audit(
    mdp: &TabularMdp,
    old: &TabularPolicy,
    gamma: f64,
    source: CriticSource,
) -> Result<AuditReport> {
    let n = mdp.num_states();
    let q_old = exact_q(mdp, old, gamma)?;
    let v_old = state_values(&q_old, old);
    let uniform = vec![1.0 / n as f64; n];
    let (critic_policy, epsilon_hat) = match source {
        CriticSource::PerGoal => (old.clone(), 0.0),
        CriticSource::AveragedPolicy => {
            let avg =
                TabularPolicy::goal_independent(&averaged_policy(mdp, old, gamma)?.view(), n)?;
            let v_avg = state_values(&exact_q(mdp, &avg, gamma)?, &avg);
            let mut eps: f64 = 0.0;
            for g in (0..n).filter(|&g| mdp.goal_distribution()[g] > 0.0) {
                for s in 0..n {
                    eps = eps.max((v_avg[[g, s]] - v_old[[g, s]]).abs());
                }
            }
            (avg, eps)
        }
    };
    let critic = bayes_optimal_critic(&exact_occupancy(mdp, &critic_policy, gamma)?, &uniform)?;
    let new = greedy_policy(&critic);
    let v_new = state_values(&exact_q(mdp, &new, gamma)?, &new);
    let p0 = mdp.initial();
    let improvement_from_start = (0..n)
        .map(|g| {
            (0..n)
                .map(|s| p0[s] * (v_new[[g, s]] - v_old[[g, s]]))
                .sum()
        })
        .collect();
    let min_pointwise_improvement: Vec<f64> = (0..n)
        .map(|g| {
            (0..n)
                .map(|s| v_new[[g, s]] - v_old[[g, s]])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let worst_improvement = (0..n)
        .filter(|&g| mdp.goal_distribution()[g] > 0.0)
        .map(|g| min_pointwise_improvement[g])
        .fold(f64::INFINITY, f64::min);
    let slack = 2.0 * gamma * epsilon_hat / (1.0 - gamma);
    Ok(AuditReport {
        source,
        gamma,
        epsilon_hat,
        slack,
        improvement_from_start,
        min_pointwise_improvement,
        worst_improvement,
        passed: worst_improvement >= -slack - AUDIT_TOLERANCE,
    })
}
