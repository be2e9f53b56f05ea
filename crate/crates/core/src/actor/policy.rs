use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::envs::{argmax, ActionSpace};
use crate::numcore::{
    hconcat, log_softmax_rows, one_hot, sigmoid, softmax_rows, softplus, Grads, Mlp, MlpCache,
    Parameterized,
};
use crate::replay::GoalConditionedLikelihood;
use crate::{Error, Result};

pub const DEFAULT_MIN_STD: f64 = 1e-6;

/// Dataset actions are pulled this far inside the box before `atanh`.
const ATANH_MARGIN: f64 = 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyHead {
    Continuous { bound: Vec<f64>, min_std: f64 },
    Discrete { num_actions: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalPolicy {
    net: Mlp,
    head: PolicyHead,
    observation_dim: usize,
}

/// Head outputs for a batch, with the cache needed to backpropagate.
pub(crate) enum Dist {
    Gaussian {
        mean: Array2<f64>,
        raw: Array2<f64>,
        std: Array2<f64>,
    },
    Categorical {
        logits: Array2<f64>,
    },
}

/// `ln(1 - tanh(u)²)` evaluated without cancellation.
pub(crate) fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

impl GoalPolicy {
    pub fn new<R: Rng + ?Sized>(
        observation_dim: usize,
        goal_dim: usize,
        action_space: &ActionSpace,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let head = match action_space {
            ActionSpace::Discrete(n) => PolicyHead::Discrete { num_actions: *n },
            ActionSpace::Continuous { bound } => PolicyHead::Continuous {
                bound: bound.clone(),
                min_std: DEFAULT_MIN_STD,
            },
        };
        let mut sizes = vec![observation_dim + goal_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(Self::head_width(&head));
        Self::from_net(Mlp::new(&sizes, rng)?, head, observation_dim)
    }

    fn head_width(head: &PolicyHead) -> usize {
        match head {
            PolicyHead::Continuous { bound, .. } => 2 * bound.len(),
            PolicyHead::Discrete { num_actions } => *num_actions,
        }
    }

    pub fn from_net(net: Mlp, head: PolicyHead, observation_dim: usize) -> Result<Self> {
        if net.output_dim() != Self::head_width(&head) {
            return Err(Error::shape(
                "policy head width",
                Self::head_width(&head),
                net.output_dim(),
            ));
        }
        if net.input_dim() <= observation_dim {
            return Err(Error::shape(
                "policy input",
                format!("> {observation_dim}"),
                net.input_dim(),
            ));
        }
        if let PolicyHead::Continuous { bound, min_std } = &head {
            if bound.iter().any(|b| !(*b > 0.0 && b.is_finite())) || !(*min_std > 0.0) {
                return Err(Error::Config(
                    "action bounds and min_std must be positive".into(),
                ));
            }
        }
        Ok(GoalPolicy {
            net,
            head,
            observation_dim,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn head(&self) -> &PolicyHead {
        &self.head
    }

    pub fn observation_dim(&self) -> usize {
        self.observation_dim
    }

    pub fn goal_dim(&self) -> usize {
        self.net.input_dim() - self.observation_dim
    }

    /// Width of the encoded action.
    pub fn action_dim(&self) -> usize {
        match &self.head {
            PolicyHead::Continuous { bound, .. } => bound.len(),
            PolicyHead::Discrete { num_actions } => *num_actions,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.head, PolicyHead::Discrete { .. })
    }

    pub(crate) fn forward(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<(Dist, MlpCache)> {
        if states.nrows() != goals.nrows() {
            return Err(Error::shape(
                "policy batch rows",
                states.nrows(),
                goals.nrows(),
            ));
        }
        if states.ncols() != self.observation_dim {
            return Err(Error::shape(
                "policy observation dim",
                self.observation_dim,
                states.ncols(),
            ));
        }
        let (out, cache) = self
            .net
            .forward_cached(&hconcat(&[states.view(), goals.view()])?.view())?;
        let dist = match &self.head {
            PolicyHead::Continuous { bound, min_std } => {
                let d = bound.len();
                let mean = out.slice(s![.., ..d]).to_owned();
                let raw = out.slice(s![.., d..]).to_owned();
                let std = raw.mapv(|r| softplus(r) + min_std);
                Dist::Gaussian { mean, raw, std }
            }
            PolicyHead::Discrete { .. } => Dist::Categorical { logits: out },
        };
        Ok((dist, cache))
    }

    /// Backpropagates gradients on the head outputs. For the Gaussian head,
    /// `d_mean` and `d_std` are with respect to `μ` and `σ`.
    pub(crate) fn backward_head(
        &self,
        dist: &Dist,
        cache: &MlpCache,
        d_a: &Array2<f64>,
        d_b: Option<&Array2<f64>>,
    ) -> Result<Grads> {
        let upstream = match dist {
            Dist::Gaussian { raw, .. } => {
                let d_std = d_b.expect("gaussian head needs a std gradient");
                let d_raw = d_std * &raw.mapv(sigmoid);
                hconcat(&[d_a.view(), d_raw.view()])?
            }
            Dist::Categorical { .. } => d_a.clone(),
        };
        Ok(self.net.backward(cache, &upstream.view())?.0)
    }

    fn bound(&self) -> &[f64] {
        match &self.head {
            PolicyHead::Continuous { bound, .. } => bound,
            PolicyHead::Discrete { .. } => &[],
        }
    }

    /// Standard normal noise of the shape a continuous sample consumes.
    pub fn draw_noise(&self, rows: usize, rng: &mut dyn RngCore) -> Array2<f64> {
        let d = if self.is_discrete() {
            0
        } else {
            self.action_dim()
        };
        Array2::from_shape_simple_fn((rows, d), || rng.sample(StandardNormal))
    }

    /// Samples encoded actions and their exact log-probabilities.
    pub fn sample_action(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
        rng: &mut dyn RngCore,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let (dist, _) = self.forward(states, goals)?;
        let b = states.nrows();
        match &dist {
            Dist::Gaussian { mean, std, .. } => {
                let z = self.draw_noise(b, rng);
                let bound = self.bound();
                let u = mean + &(std * &z);
                let actions = Array2::from_shape_fn(u.dim(), |(i, j)| u[[i, j]].tanh() * bound[j]);
                let logp = (0..b)
                    .map(|i| {
                        (0..bound.len())
                            .map(|j| {
                                -0.5 * z[[i, j]] * z[[i, j]]
                                    - std[[i, j]].ln()
                                    - HALF_LN_2PI
                                    - bound[j].ln()
                                    - log_one_minus_tanh_sq(u[[i, j]])
                            })
                            .sum()
                    })
                    .collect();
                Ok((actions, logp))
            }
            Dist::Categorical { logits } => {
                let probs = softmax_rows(&logits.view());
                let logp_all = log_softmax_rows(&logits.view());
                let mut idx = Vec::with_capacity(b);
                let mut logp = Array1::zeros(b);
                for i in 0..b {
                    let k =
                        crate::envs::sample_categorical(probs.row(i).as_slice().expect("row"), rng);
                    logp[i] = logp_all[[i, k]];
                    idx.push(k);
                }
                Ok((one_hot(&idx, self.action_dim()), logp))
            }
        }
    }

    /// `log π(a | s, g)` for encoded actions. Continuous actions are pulled
    /// inside the open box by a relative margin of 1e-6 before inversion.
    pub fn log_prob(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
    ) -> Result<Array1<f64>> {
        let (dist, _) = self.forward(states, goals)?;
        self.log_prob_of(&dist, actions)
    }

    pub(crate) fn pre_squash(&self, actions: &ArrayView2<'_, f64>) -> Array2<f64> {
        let bound = self.bound();
        Array2::from_shape_fn(actions.dim(), |(i, j)| {
            (actions[[i, j]] / bound[j])
                .clamp(-1.0 + ATANH_MARGIN, 1.0 - ATANH_MARGIN)
                .atanh()
        })
    }

    pub(crate) fn log_prob_of(
        &self,
        dist: &Dist,
        actions: &ArrayView2<'_, f64>,
    ) -> Result<Array1<f64>> {
        if actions.ncols() != self.action_dim() {
            return Err(Error::shape(
                "policy action dim",
                self.action_dim(),
                actions.ncols(),
            ));
        }
        match dist {
            Dist::Gaussian { mean, std, .. } => {
                if actions.nrows() != mean.nrows() {
                    return Err(Error::shape(
                        "policy action rows",
                        mean.nrows(),
                        actions.nrows(),
                    ));
                }
                let u = self.pre_squash(actions);
                let bound = self.bound();
                Ok(Array1::from_shape_fn(mean.nrows(), |i| {
                    (0..bound.len())
                        .map(|j| {
                            let z = (u[[i, j]] - mean[[i, j]]) / std[[i, j]];
                            -0.5 * z * z
                                - std[[i, j]].ln()
                                - HALF_LN_2PI
                                - bound[j].ln()
                                - log_one_minus_tanh_sq(u[[i, j]])
                        })
                        .sum()
                }))
            }
            Dist::Categorical { logits } => {
                if actions.nrows() != logits.nrows() {
                    return Err(Error::shape(
                        "policy action rows",
                        logits.nrows(),
                        actions.nrows(),
                    ));
                }
                let lp = log_softmax_rows(&logits.view());
                Ok(Array1::from_shape_fn(lp.nrows(), |i| {
                    lp[[i, argmax(actions.row(i).as_slice().expect("row"))]]
                }))
            }
        }
    }

    /// `tanh(μ)·bound`, or the one-hot argmax of the logits (lowest index on ties).
    pub fn act_deterministic(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let (dist, _) = self.forward(states, goals)?;
        Ok(match dist {
            Dist::Gaussian { mean, .. } => {
                let bound = self.bound();
                Array2::from_shape_fn(mean.dim(), |(i, j)| mean[[i, j]].tanh() * bound[j])
            }
            Dist::Categorical { logits } => {
                let idx: Vec<usize> = logits
                    .rows()
                    .into_iter()
                    .map(|r| argmax(r.as_slice().expect("row")))
                    .collect();
                one_hot(&idx, self.action_dim())
            }
        })
    }

    /// Action probabilities of a discrete policy, `(B, A)`.
    pub fn action_probs(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        match self.forward(states, goals)?.0 {
            Dist::Categorical { logits } => Ok(softmax_rows(&logits.view())),
            Dist::Gaussian { .. } => {
                Err(Error::Config("action_probs needs a discrete policy".into()))
            }
        }
    }
}

impl Parameterized for GoalPolicy {
    fn params(&self) -> Vec<(String, &[f64])> {
        self.net
            .params()
            .into_iter()
            .map(|(n, p)| (format!("policy.{n}"), p))
            .collect()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.net.param_shapes()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.params_mut()
    }
}

impl GoalConditionedLikelihood for GoalPolicy {
    fn log_likelihood(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        Ok(self.log_prob(states, goals, actions)?.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{rng_stream, Activation, Dense, Streams};

    /// 1-D policy with constant mean and raw-std outputs.
    fn constant_policy(mean: f64, raw: f64, bound: f64) -> GoalPolicy {
        let layer = Dense {
            weight: Array2::zeros((2, 2)),
            bias: Array1::from(vec![mean, raw]),
            activation: Activation::Identity,
        };
        GoalPolicy::from_net(
            Mlp::from_layers(vec![layer]).unwrap(),
            PolicyHead::Continuous {
                bound: vec![bound],
                min_std: DEFAULT_MIN_STD,
            },
            1,
        )
        .unwrap()
    }

    fn one(v: f64) -> Array2<f64> {
        Array2::from_elem((1, 1), v)
    }

    #[test]
    fn density_integrates_to_one() {
        for (mean, raw, bound) in [(0.3, -0.2, 2.0), (-1.0, 0.5, 1.0), (0.0, -1.5, 0.5)] {
            let p = constant_policy(mean, raw, bound);
            let n = 200_000;
            let h = 2.0 * bound / n as f64;
            let a = Array2::from_shape_fn((n - 1, 1), |(i, _)| -bound + (i + 1) as f64 * h);
            let s = Array2::zeros((n - 1, 1));
            let lp = p.log_prob(&s.view(), &s.view(), &a.view()).unwrap();
            // Simpson's rule; the density vanishes at both ends of the box.
            let total: f64 = lp
                .iter()
                .enumerate()
                .map(|(i, l)| l.exp() * if i % 2 == 0 { 4.0 } else { 2.0 })
                .sum::<f64>()
                * h
                / 3.0;
            assert!((total - 1.0).abs() < 1e-4, "{total}");
        }
    }

    #[test]
    fn sample_log_prob_matches_direct_density() {
        let p = constant_policy(0.4, 0.1, 1.5);
        let mut rng = rng_stream(1, Streams::PolicyNoise);
        let s = Array2::zeros((50, 1));
        let (a, lp) = p.sample_action(&s.view(), &s.view(), &mut rng).unwrap();
        let sigma = softplus(0.1) + DEFAULT_MIN_STD;
        for i in 0..50 {
            let x = a[[i, 0]];
            assert!(x.abs() < 1.5);
            // Change of variables written out directly: u = atanh(x / b).
            let u = 0.5 * ((1.0 + x / 1.5) / (1.0 - x / 1.5)).ln();
            let gauss = (-(u - 0.4).powi(2) / (2.0 * sigma * sigma)).exp()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            let jac = 1.5 * (1.0 - (x / 1.5).powi(2));
            let direct = (gauss / jac).ln();
            assert!((lp[i] - direct).abs() < 1e-8, "{} {}", lp[i], direct);
        }
        let again = p.log_prob(&s.view(), &s.view(), &a.view()).unwrap();
        for i in 0..50 {
            assert!((again[i] - lp[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn min_std_zero_mean_is_deterministic() {
        let p = constant_policy(0.0, -800.0, 1.0);
        let mut rng = rng_stream(2, Streams::PolicyNoise);
        let (a, lp) = p
            .sample_action(&one(0.0).view(), &one(0.0).view(), &mut rng)
            .unwrap();
        assert!(a[[0, 0]].abs() < 1e-5);
        assert!(lp[0].is_finite());
        assert_eq!(
            p.act_deterministic(&one(0.0).view(), &one(0.0).view())
                .unwrap()[[0, 0]],
            0.0
        );
    }

    #[test]
    fn boundary_dataset_actions_have_finite_log_prob() {
        let p = constant_policy(0.0, 0.0, 1.0);
        let lp = p
            .log_prob(&one(0.0).view(), &one(0.0).view(), &one(1.0).view())
            .unwrap();
        assert!(lp[0].is_finite());
    }

    #[test]
    fn stable_squash_correction() {
        for u in [-30.0, -3.0, -0.1, 0.0, 0.7, 5.0, 40.0] {
            let direct = (1.0 - f64::tanh(u).powi(2)).ln();
            let stable = log_one_minus_tanh_sq(u);
            if direct.is_finite() && u.abs() < 15.0 {
                assert!((direct - stable).abs() < 1e-9);
            }
            assert!(stable.is_finite());
        }
    }

    #[test]
    fn discrete_argmax_ties_low() {
        let layer = Dense {
            weight: Array2::zeros((2, 3)),
            bias: Array1::from(vec![1.0, 2.0, 2.0]),
            activation: Activation::Identity,
        };
        let p = GoalPolicy::from_net(
            Mlp::from_layers(vec![layer]).unwrap(),
            PolicyHead::Discrete { num_actions: 3 },
            1,
        )
        .unwrap();
        let a = p
            .act_deterministic(&one(0.0).view(), &one(0.0).view())
            .unwrap();
        assert_eq!(a.row(0).to_vec(), vec![0.0, 1.0, 0.0]);
        let probs = p.action_probs(&one(0.0).view(), &one(0.0).view()).unwrap();
        assert!((probs.sum() - 1.0).abs() < 1e-12);
    }
}
