//! Reward-free baselines: goal-conditioned behavioral cloning and a
//! model-based agent that fits the discounted occupancy with a density model
//! and picks actions that make the commanded goal likely.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;

use crate::actor::{bc_loss, policy_objective, ActionScorer, GoalPolicy};
use crate::envs::argmax;
use crate::numcore::{
    hconcat, log_softmax_rows, one_hot, sigmoid, softmax_rows, softplus, Grads, Mlp, MlpCache,
    Parameterized,
};
use crate::{Error, Result};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `-mean ln π(a | s, g = s_f)` on relabeled triplets.
pub fn gcbc_loss(
    policy: &GoalPolicy,
    states: &ArrayView2<'_, f64>,
    actions: &ArrayView2<'_, f64>,
    future_goals: &ArrayView2<'_, f64>,
) -> Result<(f64, Grads)> {
    bc_loss(policy, states, future_goals, actions)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DensityHead {
    /// Diagonal Gaussian over goal coordinates; `var = softplus(raw) + floor`.
    Gaussian {
        goal_dim: usize,
        variance_floor: f64,
    },
    /// Categorical over `num_classes` goals encoded one-hot.
    Categorical { num_classes: usize },
}

/// `q(g | s, a)`, a model of the discounted future-state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    net: Mlp,
    head: DensityHead,
    observation_dim: usize,
}

impl DensityModel {
    pub fn new<R: Rng + ?Sized>(
        observation_dim: usize,
        action_dim: usize,
        head: DensityHead,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![observation_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(Self::head_width(&head));
        Self::from_net(Mlp::new(&sizes, rng)?, head, observation_dim)
    }

    fn head_width(head: &DensityHead) -> usize {
        match head {
            DensityHead::Gaussian { goal_dim, .. } => 2 * goal_dim,
            DensityHead::Categorical { num_classes } => *num_classes,
        }
    }

    pub fn from_net(net: Mlp, head: DensityHead, observation_dim: usize) -> Result<Self> {
        if net.output_dim() != Self::head_width(&head) {
            return Err(Error::shape(
                "density head width",
                Self::head_width(&head),
                net.output_dim(),
            ));
        }
        if let DensityHead::Gaussian { variance_floor, .. } = head {
            if !(variance_floor > 0.0) {
                return Err(Error::Config(format!(
                    "variance floor must be positive, got {variance_floor}"
                )));
            }
        }
        if net.input_dim() <= observation_dim {
            return Err(Error::shape(
                "density input",
                format!("> {observation_dim}"),
                net.input_dim(),
            ));
        }
        Ok(DensityModel {
            net,
            head,
            observation_dim,
        })
    }

    pub fn head(&self) -> &DensityHead {
        &self.head
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn action_dim(&self) -> usize {
        self.net.input_dim() - self.observation_dim
    }

    fn forward(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, MlpCache)> {
        if states.nrows() != actions.nrows() {
            return Err(Error::shape(
                "density batch rows",
                states.nrows(),
                actions.nrows(),
            ));
        }
        self.net
            .forward_cached(&hconcat(&[states.view(), actions.view()])?.view())
    }

    /// Per-row `ln q(g | s, a)` and its gradient with respect to the head outputs.
    fn log_q_and_head_grad(
        &self,
        out: &Array2<f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        if goals.nrows() != out.nrows() {
            return Err(Error::shape(
                "density goal rows",
                out.nrows(),
                goals.nrows(),
            ));
        }
        match &self.head {
            DensityHead::Gaussian {
                goal_dim,
                variance_floor,
            } => {
                let d = *goal_dim;
                if goals.ncols() != d {
                    return Err(Error::shape("density goal dim", d, goals.ncols()));
                }
                let mut lq = Array1::zeros(out.nrows());
                let mut grad = Array2::zeros(out.dim());
                for i in 0..out.nrows() {
                    for j in 0..d {
                        let (mu, raw) = (out[[i, j]], out[[i, d + j]]);
                        let var = softplus(raw) + variance_floor;
                        let r = goals[[i, j]] - mu;
                        lq[i] += -0.5 * r * r / var - 0.5 * var.ln() - HALF_LN_2PI;
                        grad[[i, j]] = r / var;
                        grad[[i, d + j]] = (0.5 * r * r / (var * var) - 0.5 / var) * sigmoid(raw);
                    }
                }
                Ok((lq, grad))
            }
            DensityHead::Categorical { num_classes } => {
                if goals.ncols() != *num_classes {
                    return Err(Error::shape(
                        "density goal classes",
                        num_classes,
                        goals.ncols(),
                    ));
                }
                let lp = log_softmax_rows(&out.view());
                let mut grad = -softmax_rows(&out.view());
                let mut lq = Array1::zeros(out.nrows());
                for i in 0..out.nrows() {
                    let k = argmax(goals.row(i).as_slice().expect("row"));
                    lq[i] = lp[[i, k]];
                    grad[[i, k]] += 1.0;
                }
                Ok((lq, grad))
            }
        }
    }

    pub fn log_density(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<Array1<f64>> {
        let (out, _) = self.forward(states, actions)?;
        Ok(self.log_q_and_head_grad(&out, goals)?.0)
    }

    /// Class probabilities of a categorical head, `(B, classes)`.
    pub fn class_probs(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        match self.head {
            DensityHead::Categorical { .. } => {
                Ok(softmax_rows(&self.forward(states, actions)?.0.view()))
            }
            DensityHead::Gaussian { .. } => {
                Err(Error::Config("class_probs needs a categorical head".into()))
            }
        }
    }

    /// Mean and variance of a Gaussian head.
    pub fn gaussian_params(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        match self.head {
            DensityHead::Gaussian {
                goal_dim,
                variance_floor,
            } => {
                let out = self.forward(states, actions)?.0;
                let mean = out.slice(s![.., ..goal_dim]).to_owned();
                let var = out
                    .slice(s![.., goal_dim..])
                    .mapv(|r| softplus(r) + variance_floor);
                Ok((mean, var))
            }
            DensityHead::Categorical { .. } => Err(Error::Config(
                "gaussian_params needs a gaussian head".into(),
            )),
        }
    }
}

impl Parameterized for DensityModel {
    fn params(&self) -> Vec<(String, &[f64])> {
        self.net
            .params()
            .into_iter()
            .map(|(n, p)| (format!("density.{n}"), p))
            .collect()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.net.param_shapes()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.params_mut()
    }
}

/// Negative log-likelihood of the future states, `-Σ wᵢ ln q(gᵢ | sᵢ, aᵢ) / Σ wᵢ`.
/// `weights = None` is the plain mean.
pub fn density_loss(
    model: &DensityModel,
    states: &ArrayView2<'_, f64>,
    actions: &ArrayView2<'_, f64>,
    future_goals: &ArrayView2<'_, f64>,
    weights: Option<&[f64]>,
) -> Result<(f64, Grads)> {
    let b = states.nrows();
    if b == 0 {
        return Err(Error::EmptyBuffer);
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() == b => w.to_vec(),
        Some(w) => return Err(Error::shape("density weights", b, w.len())),
        None => vec![1.0; b],
    };
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Config(
            "density weights must have positive sum".into(),
        ));
    }
    let (out, cache) = model.forward(states, actions)?;
    let (lq, mut grad) = model.log_q_and_head_grad(&out, future_goals)?;
    let loss = -lq.iter().zip(&w).map(|(l, w)| l * w).sum::<f64>() / total;
    for (mut row, wi) in grad.rows_mut().into_iter().zip(&w) {
        row *= -wi / total;
    }
    Ok((loss, model.net.backward(&cache, &grad.view())?.0))
}

impl ActionScorer for DensityModel {
    fn score_with_action_grad(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let (out, cache) = self.forward(states, actions)?;
        let (lq, grad) = self.log_q_and_head_grad(&out, goals)?;
        let (_, dx) = self.net.backward(&cache, &grad.view())?;
        Ok((lq, dx.slice(s![.., self.observation_dim..]).to_owned()))
    }

    fn score_all_actions(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let (b, n) = (states.nrows(), self.action_dim());
        let mut out = Array2::zeros((b, n));
        for k in 0..n {
            let a = one_hot(&vec![k; b], n);
            out.column_mut(k)
                .assign(&self.log_density(states, &a.view(), goals)?);
        }
        Ok(out)
    }
}

/// `-mean ln q(g | s, a~π(·|s,g)) - entropy_coeff · H`, reparametrized through `a`.
pub fn mb_actor_loss(
    policy: &GoalPolicy,
    model: &DensityModel,
    states: &ArrayView2<'_, f64>,
    goals: &ArrayView2<'_, f64>,
    noise: &ArrayView2<'_, f64>,
    entropy_coeff: f64,
) -> Result<(f64, Grads)> {
    policy_objective(policy, model, states, goals, noise, 1.0, entropy_coeff)
}
