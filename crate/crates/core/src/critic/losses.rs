use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};

use super::ContrastiveCritic;
use crate::numcore::{
    log_sigmoid, logsumexp, row_dot, sigmoid, sigmoid_bce_with_logits, softmax_rows, Grads,
};
use crate::replay::{MixtureBatch, NceBatch, TdBatch};
use crate::{Error, Result};

fn need_negatives(b: usize) -> Result<()> {
    if b < 2 {
        return Err(Error::Config(format!(
            "contrastive loss needs batch size >= 2, got {b}"
        )));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )));
    }
    Ok(())
}

/// Backpropagates an upstream gradient on the `B×B` logits matrix.
fn outer_backward(
    critic: &ContrastiveCritic,
    batch: &NceBatch,
    d_logits: impl FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
) -> Result<(f64, Grads)> {
    need_negatives(batch.len())?;
    let sa = critic.encode_sa(&batch.states.view(), &batch.actions.view())?;
    let g = critic.encode_g(&batch.future_goals.view())?;
    let logits = sa.repr.dot(&g.repr.t());
    let (loss, d) = d_logits(&logits)?;
    let d_phi = d.dot(&g.repr);
    let d_psi = d.t().dot(&sa.repr);
    let grads = critic.backward(&sa, &d_phi.view(), &g, &d_psi.view())?;
    Ok((loss, grads))
}

/// Binary NCE: mean sigmoid cross-entropy of the logits matrix against the
/// identity labels, averaged over all `B²` entries.
pub fn nce_loss(critic: &ContrastiveCritic, batch: &NceBatch) -> Result<(f64, Grads)> {
    outer_backward(critic, batch, |logits| {
        let labels = Array2::eye(logits.nrows());
        sigmoid_bce_with_logits(&logits.view(), &labels.view())
    })
}

/// Row-wise softmax cross-entropy with the positive on the diagonal, plus
/// `reg_coeff · mean_i (logsumexp_j L_ij)²`.
pub fn cpc_loss(
    critic: &ContrastiveCritic,
    batch: &NceBatch,
    reg_coeff: f64,
) -> Result<(f64, Grads)> {
    outer_backward(critic, batch, |logits| {
        let b = logits.nrows();
        let bf = b as f64;
        let lse = logsumexp(&logits.view(), 1)?;
        let probs = softmax_rows(&logits.view());
        let mut loss = 0.0;
        let mut d = Array2::zeros((b, b));
        for i in 0..b {
            loss += (lse[i] - logits[[i, i]]) / bf + reg_coeff * lse[i] * lse[i] / bf;
            for j in 0..b {
                let ce = probs[[i, j]] - if i == j { 1.0 } else { 0.0 };
                d[[i, j]] = (ce + 2.0 * reg_coeff * lse[i] * probs[[i, j]]) / bf;
            }
        }
        Ok((loss, d))
    })
}

/// Stop-gradient bootstrap weights `clip(exp f(s', a', g), 0, clip)`.
pub fn td_weights(
    critic: &ContrastiveCritic,
    next_states: &ArrayView2<'_, f64>,
    next_actions: &ArrayView2<'_, f64>,
    goals: &ArrayView2<'_, f64>,
    clip: f64,
) -> Result<Array1<f64>> {
    let f = critic.pairwise_values(next_states, next_actions, goals)?;
    Ok(f.mapv(|v| v.exp().min(clip)))
}

/// Row-wise terms sharing `φ(s, a)` with two goal sets: `pos_goals` carry
/// positive weight `pos_coeff[i]`, `goals` carry the bootstrapped positive
/// weight `γ w_i` and a negative weight `neg_coeff`. Returns the loss
/// `-Σ pos_coeff logσ(f⁺) - Σ (γ w / B) logσ(f) - neg_coeff Σ log(1-σ(f)) / B`
/// with gradients.
struct TdTerms<'a> {
    pos_states: ArrayView2<'a, f64>,
    pos_actions: ArrayView2<'a, f64>,
    pos_goals: ArrayView2<'a, f64>,
    pos_coeff: Vec<f64>,
    td: &'a TdBatch,
    td_weights: &'a Array1<f64>,
    gamma: f64,
    neg_coeff: f64,
}

fn td_terms(critic: &ContrastiveCritic, t: TdTerms<'_>) -> Result<(f64, Grads)> {
    let b = t.td.states.nrows();
    let p = t.pos_states.nrows();
    if b == 0 || p == 0 {
        return Err(Error::EmptyBuffer);
    }
    if t.td_weights.len() != b || t.td.goals.nrows() != b {
        return Err(Error::shape("td weights", b, t.td_weights.len()));
    }
    let states = concatenate(Axis(0), &[t.pos_states, t.td.states.view()])
        .map_err(|e| Error::shape("td rows", "equal cols", e))?;
    let actions = concatenate(Axis(0), &[t.pos_actions, t.td.actions.view()])
        .map_err(|e| Error::shape("td rows", "equal cols", e))?;
    let goals = concatenate(Axis(0), &[t.pos_goals, t.td.goals.view()])
        .map_err(|e| Error::shape("td rows", "equal cols", e))?;
    let sa = critic.encode_sa(&states.view(), &actions.view())?;
    let g = critic.encode_g(&goals.view())?;
    let f = row_dot(&sa.repr.view(), &g.repr.view());
    let bf = b as f64;
    let mut loss = 0.0;
    let mut d_f = Array1::zeros(p + b);
    for i in 0..p {
        loss -= t.pos_coeff[i] * log_sigmoid(f[i]);
        d_f[i] = -t.pos_coeff[i] * (1.0 - sigmoid(f[i]));
    }
    for i in 0..b {
        let x = f[p + i];
        let w = t.gamma * t.td_weights[i];
        loss -= (w * log_sigmoid(x) + t.neg_coeff * log_sigmoid(-x)) / bf;
        d_f[p + i] = (-w * (1.0 - sigmoid(x)) + t.neg_coeff * sigmoid(x)) / bf;
    }
    let col = d_f.view().insert_axis(Axis(1));
    let d_phi = &g.repr * &col;
    let d_psi = &sa.repr * &col;
    let grads = critic.backward(&sa, &d_phi.view(), &g, &d_psi.view())?;
    Ok((loss, grads))
}

/// C-learning with the bootstrap weights held fixed:
/// `-(1-γ) mean logσ f(s,a,s') - γ mean[w logσ f(s,a,g)] - mean log(1-σ f(s,a,g))`.
pub fn c_learning_loss_given_weights(
    critic: &ContrastiveCritic,
    td: &TdBatch,
    weights: &Array1<f64>,
    gamma: f64,
) -> Result<(f64, Grads)> {
    check_gamma(gamma)?;
    let b = td.states.nrows();
    td_terms(
        critic,
        TdTerms {
            pos_states: td.states.view(),
            pos_actions: td.actions.view(),
            pos_goals: td.next_goals.view(),
            pos_coeff: vec![(1.0 - gamma) / b as f64; b],
            td,
            td_weights: weights,
            gamma,
            neg_coeff: 1.0,
        },
    )
}

/// C-learning; `next_actions` are `a' ~ π(·|s', g)` for the batch's random goals.
pub fn c_learning_loss(
    critic: &ContrastiveCritic,
    td: &TdBatch,
    next_actions: &ArrayView2<'_, f64>,
    gamma: f64,
    clip: f64,
) -> Result<(f64, Grads)> {
    let w = td_weights(
        critic,
        &td.next_states.view(),
        next_actions,
        &td.goals.view(),
        clip,
    )?;
    c_learning_loss_given_weights(critic, td, &w, gamma)
}

/// NCE+C with the bootstrap weights held fixed. Positives come from the
/// mixture batch, weighted by its per-row weights normalized to their sum:
/// `L = -(2-γ) Σ wᵢ logσ f⁺ᵢ / Σ wᵢ - γ mean[w logσ f(s,a,g)] - 2 mean log(1-σ f(s,a,g))`.
/// No outer product is formed.
pub fn nce_plus_c_loss_given_weights(
    critic: &ContrastiveCritic,
    mixture: &MixtureBatch,
    td: &TdBatch,
    weights: &Array1<f64>,
    gamma: f64,
) -> Result<(f64, Grads)> {
    check_gamma(gamma)?;
    let total: f64 = mixture.weights.iter().sum();
    if mixture.weights.len() != mixture.states.nrows() || !(total > 0.0) {
        return Err(Error::shape(
            "mixture weights",
            mixture.states.nrows(),
            mixture.weights.len(),
        ));
    }
    td_terms(
        critic,
        TdTerms {
            pos_states: mixture.states.view(),
            pos_actions: mixture.actions.view(),
            pos_goals: mixture.positives.view(),
            pos_coeff: mixture
                .weights
                .iter()
                .map(|w| (2.0 - gamma) * w / total)
                .collect(),
            td,
            td_weights: weights,
            gamma,
            neg_coeff: 2.0,
        },
    )
}

pub fn nce_plus_c_loss(
    critic: &ContrastiveCritic,
    mixture: &MixtureBatch,
    td: &TdBatch,
    next_actions: &ArrayView2<'_, f64>,
    gamma: f64,
    clip: f64,
) -> Result<(f64, Grads)> {
    let w = td_weights(
        critic,
        &td.next_states.view(),
        next_actions,
        &td.goals.view(),
        clip,
    )?;
    nce_plus_c_loss_given_weights(critic, mixture, td, &w, gamma)
}
