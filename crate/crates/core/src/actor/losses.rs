use ndarray::{Array1, Array2, ArrayView2};

use super::policy::{Dist, GoalPolicy};
use crate::critic::ContrastiveCritic;
use crate::numcore::{log_softmax_rows, softmax_rows, Grads};
use crate::{Error, Result};

/// A differentiable score of `(s, a, g)` that the policy maximizes: the
/// critic `f`, a minimum over critics, or a density `ln q(g | s, a)`.
pub trait ActionScorer {
    /// Per-row score and its gradient with respect to the action features.
    fn score_with_action_grad(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)>;

    /// Score of every one-hot action, `(B, A)`.
    fn score_all_actions(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>>;
}

impl ActionScorer for ContrastiveCritic {
    fn score_with_action_grad(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let (v, _, da) = self.input_gradients(states, actions, goals)?;
        Ok((v, da))
    }

    fn score_all_actions(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.values_for_all_actions(states, goals)
    }
}

/// Row-wise minimum over an ensemble of critics; the gradient is that of
/// the minimizing critic (lowest index on ties).
pub struct MinOfCritics<'a>(pub &'a [ContrastiveCritic]);

impl ActionScorer for MinOfCritics<'_> {
    fn score_with_action_grad(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let (first, rest) = self
            .0
            .split_first()
            .ok_or_else(|| Error::Config("no critics".into()))?;
        let (mut v, mut da) = first.score_with_action_grad(states, actions, goals)?;
        for c in rest {
            let (vk, dk) = c.score_with_action_grad(states, actions, goals)?;
            for i in 0..v.len() {
                if vk[i] < v[i] {
                    v[i] = vk[i];
                    da.row_mut(i).assign(&dk.row(i));
                }
            }
        }
        Ok((v, da))
    }

    fn score_all_actions(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let (first, rest) = self
            .0
            .split_first()
            .ok_or_else(|| Error::Config("no critics".into()))?;
        let mut out = first.score_all_actions(states, goals)?;
        for c in rest {
            let other = c.score_all_actions(states, goals)?;
            out.zip_mut_with(&other, |a, &b| *a = a.min(b));
        }
        Ok(out)
    }
}

/// `-mean[weight · score(s, a, g)] - entropy_coeff · H(π(·|s, g))` with
/// gradients for the policy only.
///
/// Continuous policies use the reparametrized action
/// `a = tanh(μ + σ z)·bound` for the given standard normal `noise` and a
/// single-sample entropy estimate `H ≈ -ln π(a)`. Discrete policies use the
/// exact expectation over actions and the exact entropy; `noise` is ignored.
pub fn policy_objective(
    policy: &GoalPolicy,
    scorer: &dyn ActionScorer,
    states: &ArrayView2<'_, f64>,
    goals: &ArrayView2<'_, f64>,
    noise: &ArrayView2<'_, f64>,
    weight: f64,
    entropy_coeff: f64,
) -> Result<(f64, Grads)> {
    let b = states.nrows();
    if b == 0 {
        return Err(Error::EmptyBuffer);
    }
    let bf = b as f64;
    let (dist, cache) = policy.forward(states, goals)?;
    match &dist {
        Dist::Gaussian { mean, std, .. } => {
            if noise.dim() != mean.dim() {
                return Err(Error::shape(
                    "policy noise",
                    format!("{:?}", mean.dim()),
                    format!("{:?}", noise.dim()),
                ));
            }
            let bound = match policy.head() {
                super::PolicyHead::Continuous { bound, .. } => bound.clone(),
                super::PolicyHead::Discrete { .. } => unreachable!(),
            };
            let u = mean + &(std * noise);
            let t = u.mapv(f64::tanh);
            let actions = Array2::from_shape_fn(u.dim(), |(i, j)| t[[i, j]] * bound[j]);
            let (score, ds_da) = scorer.score_with_action_grad(states, &actions.view(), goals)?;
            let logp = policy.log_prob_of_sample(std, noise, &u);
            let loss = (-weight * score.sum() + entropy_coeff * logp.sum()) / bf;
            let mut d_mean = Array2::zeros(u.dim());
            let mut d_std = Array2::zeros(u.dim());
            for ((i, j), &tij) in t.indexed_iter() {
                let du = -weight * ds_da[[i, j]] * bound[j] * (1.0 - tij * tij);
                let z = noise[[i, j]];
                d_mean[[i, j]] = (du + entropy_coeff * 2.0 * tij) / bf;
                d_std[[i, j]] =
                    (du * z + entropy_coeff * (-1.0 / std[[i, j]] + 2.0 * tij * z)) / bf;
            }
            let grads = policy.backward_head(&dist, &cache, &d_mean, Some(&d_std))?;
            Ok((loss, grads))
        }
        Dist::Categorical { logits } => {
            let probs = softmax_rows(&logits.view());
            let logp = log_softmax_rows(&logits.view());
            let f = scorer.score_all_actions(states, goals)?;
            let mut loss = 0.0;
            let mut d = Array2::zeros(logits.dim());
            for i in 0..b {
                let expected: f64 = (0..probs.ncols()).map(|k| probs[[i, k]] * f[[i, k]]).sum();
                let entropy: f64 = -(0..probs.ncols())
                    .map(|k| probs[[i, k]] * logp[[i, k]])
                    .sum::<f64>();
                loss += (-weight * expected - entropy_coeff * entropy) / bf;
                for k in 0..probs.ncols() {
                    let p = probs[[i, k]];
                    d[[i, k]] = (-weight * p * (f[[i, k]] - expected)
                        + entropy_coeff * p * (logp[[i, k]] + entropy))
                        / bf;
                }
            }
            let grads = policy.backward_head(&dist, &cache, &d, None)?;
            Ok((loss, grads))
        }
    }
}

/// Online actor objective: `-mean f(s, a~π, g) - entropy_coeff · H`.
/// Gradients reach the policy through the action; critic parameters are
/// never differentiated.
pub fn actor_loss(
    policy: &GoalPolicy,
    critic: &ContrastiveCritic,
    states: &ArrayView2<'_, f64>,
    goals: &ArrayView2<'_, f64>,
    noise: &ArrayView2<'_, f64>,
    entropy_coeff: f64,
) -> Result<(f64, Grads)> {
    policy_objective(policy, critic, states, goals, noise, 1.0, entropy_coeff)
}

/// Behavioral cloning: `-mean ln π(a_data | s, g)`.
pub fn bc_loss(
    policy: &GoalPolicy,
    states: &ArrayView2<'_, f64>,
    goals: &ArrayView2<'_, f64>,
    actions: &ArrayView2<'_, f64>,
) -> Result<(f64, Grads)> {
    let b = states.nrows();
    if b == 0 {
        return Err(Error::EmptyBuffer);
    }
    let bf = b as f64;
    let (dist, cache) = policy.forward(states, goals)?;
    let logp = policy.log_prob_of(&dist, actions)?;
    let loss = -logp.sum() / bf;
    let grads = match &dist {
        Dist::Gaussian { mean, std, .. } => {
            let u = policy.pre_squash(actions);
            let mut d_mean = Array2::zeros(mean.dim());
            let mut d_std = Array2::zeros(mean.dim());
            for ((i, j), &m) in mean.indexed_iter() {
                let (sd, r) = (std[[i, j]], u[[i, j]] - m);
                d_mean[[i, j]] = -(r / (sd * sd)) / bf;
                d_std[[i, j]] = -(r * r / (sd * sd * sd) - 1.0 / sd) / bf;
            }
            policy.backward_head(&dist, &cache, &d_mean, Some(&d_std))?
        }
        Dist::Categorical { logits } => {
            let mut d = softmax_rows(&logits.view());
            for i in 0..b {
                let k = crate::envs::argmax(actions.row(i).as_slice().expect("row"));
                d[[i, k]] -= 1.0;
            }
            d /= bf;
            policy.backward_head(&dist, &cache, &d, None)?
        }
    };
    Ok((loss, grads))
}

/// `-mean[(1-λ) min_k f_k(s, a~π, g) + λ ln π(a_data | s, g)]`.
///
/// At `λ = 1` the critic term is not evaluated, so the result is exactly
/// [`bc_loss`].
#[allow(clippy::too_many_arguments)]
pub fn offline_actor_loss(
    policy: &GoalPolicy,
    critics: &[ContrastiveCritic],
    states: &ArrayView2<'_, f64>,
    dataset_actions: &ArrayView2<'_, f64>,
    goals: &ArrayView2<'_, f64>,
    noise: &ArrayView2<'_, f64>,
    lambda: f64,
) -> Result<(f64, Grads)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "offline lambda must lie in [0, 1], got {lambda}"
        )));
    }
    if critics.is_empty() {
        return Err(Error::Config(
            "offline actor needs at least one critic".into(),
        ));
    }
    if lambda == 1.0 {
        return bc_loss(policy, states, goals, dataset_actions);
    }
    let (lc, mut g) = policy_objective(
        policy,
        &MinOfCritics(critics),
        states,
        goals,
        noise,
        1.0 - lambda,
        0.0,
    )?;
    if lambda == 0.0 {
        return Ok((lc, g));
    }
    let (lb, gb) = bc_loss(policy, states, goals, dataset_actions)?;
    g.add_scaled(&gb, lambda);
    Ok((lc + lambda * lb, g))
}

impl GoalPolicy {
    /// `ln π` of a reparametrized sample from its noise and pre-squash value.
    pub(crate) fn log_prob_of_sample(
        &self,
        std: &Array2<f64>,
        noise: &ArrayView2<'_, f64>,
        u: &Array2<f64>,
    ) -> Array1<f64> {
        let bound = match self.head() {
            super::PolicyHead::Continuous { bound, .. } => bound.as_slice(),
            super::PolicyHead::Discrete { .. } => &[],
        };
        Array1::from_shape_fn(u.nrows(), |i| {
            (0..bound.len())
                .map(|j| {
                    let z = noise[[i, j]];
                    -0.5 * z * z
                        - std[[i, j]].ln()
                        - 0.918_938_533_204_672_8
                        - bound[j].ln()
                        - super::policy::log_one_minus_tanh_sq(u[[i, j]])
                })
                .sum()
        })
    }
}
