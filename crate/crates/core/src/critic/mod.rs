//! The contrastive critic `f(s, a, g) = φ(s, a)ᵀ ψ(g)` and its training
//! objectives.
//!
//! Every loss returns its value together with gradients for the critic's
//! parameters, in the block order of [`ContrastiveCritic::params`].

mod losses;
mod table;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{hconcat, one_hot, row_dot, Grads, Mlp, MlpCache, Parameterized};
use crate::{Error, Result};

pub use losses::{
    c_learning_loss, c_learning_loss_given_weights, cpc_loss, nce_loss, nce_plus_c_loss,
    nce_plus_c_loss_given_weights, td_weights,
};
pub use table::TableCritic;

pub const DEFAULT_TD_WEIGHT_CLIP: f64 = 20.0;
pub const DEFAULT_CPC_REG_COEFF: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticObjective {
    Nce,
    Cpc,
    CLearning,
    NcePlusC,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticVariant {
    pub objective: CriticObjective,
    pub cpc_reg_coeff: f64,
    /// Upper clip on the bootstrapped weight `exp(f)`; `f64::INFINITY`
    /// disables clipping.
    pub td_weight_clip: f64,
}

impl CriticVariant {
    pub fn new(objective: CriticObjective) -> Self {
        CriticVariant {
            objective,
            cpc_reg_coeff: DEFAULT_CPC_REG_COEFF,
            td_weight_clip: DEFAULT_TD_WEIGHT_CLIP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cpc_reg_coeff >= 0.0) {
            return Err(Error::Config(format!(
                "cpc_reg_coeff must be >= 0, got {}",
                self.cpc_reg_coeff
            )));
        }
        if !(self.td_weight_clip > 0.0) {
            return Err(Error::Config(format!(
                "td_weight_clip must be > 0, got {}",
                self.td_weight_clip
            )));
        }
        Ok(())
    }

    /// Whether the objective bootstraps through `a' ~ π(·|s', g)`.
    pub fn needs_next_actions(&self) -> bool {
        matches!(
            self.objective,
            CriticObjective::CLearning | CriticObjective::NcePlusC
        )
    }
}

/// State-action encoder `φ` and goal encoder `ψ`. Representations are raw
/// encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveCritic {
    sa_encoder: Mlp,
    g_encoder: Mlp,
    action_dim: usize,
}

pub(crate) struct Encoded {
    pub repr: Array2<f64>,
    pub cache: MlpCache,
}

impl ContrastiveCritic {
    pub fn new<R: Rng + ?Sized>(
        observation_dim: usize,
        action_dim: usize,
        goal_dim: usize,
        hidden: &[usize],
        repr_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = |input: usize| {
            let mut v = vec![input];
            v.extend_from_slice(hidden);
            v.push(repr_dim);
            v
        };
        let sa_encoder = Mlp::new(&sizes(observation_dim + action_dim), rng)?;
        let g_encoder = Mlp::new(&sizes(goal_dim), rng)?;
        Self::from_encoders(sa_encoder, g_encoder, action_dim)
    }

    pub fn from_encoders(sa_encoder: Mlp, g_encoder: Mlp, action_dim: usize) -> Result<Self> {
        if sa_encoder.output_dim() != g_encoder.output_dim() {
            return Err(Error::shape(
                "critic representation dim",
                sa_encoder.output_dim(),
                g_encoder.output_dim(),
            ));
        }
        if sa_encoder.input_dim() <= action_dim {
            return Err(Error::shape(
                "sa encoder input",
                format!("> {action_dim}"),
                sa_encoder.input_dim(),
            ));
        }
        Ok(ContrastiveCritic {
            sa_encoder,
            g_encoder,
            action_dim,
        })
    }

    pub fn sa_encoder(&self) -> &Mlp {
        &self.sa_encoder
    }

    pub fn g_encoder(&self) -> &Mlp {
        &self.g_encoder
    }

    pub fn observation_dim(&self) -> usize {
        self.sa_encoder.input_dim() - self.action_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn goal_dim(&self) -> usize {
        self.g_encoder.input_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.g_encoder.output_dim()
    }

    /// Number of parameter blocks owned by `φ`; the rest belong to `ψ`.
    pub fn sa_block_count(&self) -> usize {
        self.sa_encoder.params().len()
    }

    fn sa_input(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        if states.nrows() != actions.nrows() {
            return Err(Error::shape(
                "critic batch rows",
                states.nrows(),
                actions.nrows(),
            ));
        }
        if actions.ncols() != self.action_dim {
            return Err(Error::shape(
                "critic action dim",
                self.action_dim,
                actions.ncols(),
            ));
        }
        hconcat(&[states.view(), actions.view()])
    }

    /// `φ(s, a)`, one row per input row.
    pub fn sa_repr(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.sa_encoder
            .forward(&self.sa_input(states, actions)?.view())
    }

    /// `ψ(g)`, one row per input row.
    pub fn g_repr(&self, goals: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.g_encoder.forward(goals)
    }

    pub(crate) fn encode_sa(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
    ) -> Result<Encoded> {
        let (repr, cache) = self
            .sa_encoder
            .forward_cached(&self.sa_input(states, actions)?.view())?;
        Ok(Encoded { repr, cache })
    }

    pub(crate) fn encode_g(&self, goals: &ArrayView2<'_, f64>) -> Result<Encoded> {
        let (repr, cache) = self.g_encoder.forward_cached(goals)?;
        Ok(Encoded { repr, cache })
    }

    /// Parameter gradients given upstream gradients on both representations.
    pub(crate) fn backward(
        &self,
        sa: &Encoded,
        d_phi: &ArrayView2<'_, f64>,
        g: &Encoded,
        d_psi: &ArrayView2<'_, f64>,
    ) -> Result<Grads> {
        let (g_sa, _) = self.sa_encoder.backward(&sa.cache, d_phi)?;
        let (g_g, _) = self.g_encoder.backward(&g.cache, d_psi)?;
        Ok(Grads::concat(vec![g_sa, g_g]))
    }

    /// Entry `(i, j)` is `f(s_i, a_i, g_j)`. Goal representations are
    /// computed once for the whole batch.
    pub fn logits_matrix(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        if goals.nrows() != states.nrows() {
            return Err(Error::shape(
                "logits_matrix goals",
                states.nrows(),
                goals.nrows(),
            ));
        }
        let phi = self.sa_repr(states, actions)?;
        let psi = self.g_repr(goals)?;
        Ok(phi.dot(&psi.t()))
    }

    /// `f(s_i, a_i, g_i)` for every row.
    pub fn pairwise_values(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<Array1<f64>> {
        if goals.nrows() != states.nrows() {
            return Err(Error::shape(
                "pairwise goals",
                states.nrows(),
                goals.nrows(),
            ));
        }
        let phi = self.sa_repr(states, actions)?;
        let psi = self.g_repr(goals)?;
        Ok(row_dot(&phi.view(), &psi.view()))
    }

    pub fn critic_value(&self, state: &[f64], action: &[f64], goal: &[f64]) -> Result<f64> {
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape");
        Ok(self.pairwise_values(&row(state).view(), &row(action).view(), &row(goal).view())?[0])
    }

    /// `f(s_i, e_k, g_i)` for every discrete action `k`, as a `(B, A)` matrix.
    pub fn values_for_all_actions(
        &self,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let b = states.nrows();
        let psi = self.g_repr(goals)?;
        let mut out = Array2::zeros((b, self.action_dim));
        for k in 0..self.action_dim {
            let actions = one_hot(&vec![k; b], self.action_dim);
            let phi = self.sa_repr(states, &actions.view())?;
            out.column_mut(k).assign(&row_dot(&phi.view(), &psi.view()));
        }
        Ok(out)
    }

    /// Row values `f_i` and their gradients with respect to the state and
    /// action inputs, `(f, ∂f/∂s, ∂f/∂a)`. Critic parameters are untouched.
    pub fn input_gradients(
        &self,
        states: &ArrayView2<'_, f64>,
        actions: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
        if goals.nrows() != states.nrows() {
            return Err(Error::shape(
                "input_gradients goals",
                states.nrows(),
                goals.nrows(),
            ));
        }
        let sa = self.encode_sa(states, actions)?;
        let psi = self.g_repr(goals)?;
        let values = row_dot(&sa.repr.view(), &psi.view());
        let (_, dx) = self.sa_encoder.backward(&sa.cache, &psi.view())?;
        let obs = self.observation_dim();
        Ok((
            values,
            dx.slice(s![.., ..obs]).to_owned(),
            dx.slice(s![.., obs..]).to_owned(),
        ))
    }
}

impl Parameterized for ContrastiveCritic {
    fn params(&self) -> Vec<(String, &[f64])> {
        let sa = self
            .sa_encoder
            .params()
            .into_iter()
            .map(|(n, p)| (format!("sa_encoder.{n}"), p));
        let g = self
            .g_encoder
            .params()
            .into_iter()
            .map(|(n, p)| (format!("g_encoder.{n}"), p));
        sa.chain(g).collect()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut v = self.sa_encoder.param_shapes();
        v.extend(self.g_encoder.param_shapes());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.sa_encoder.params_mut();
        v.extend(self.g_encoder.params_mut());
        v
    }
}
