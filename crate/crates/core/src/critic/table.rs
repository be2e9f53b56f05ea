use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::numcore::{log_sigmoid, sigmoid, AdamConfig, AdamState, Grads, Parameterized};
use crate::{Error, Result};

/// One free logit per `(s, a, g)` for tabular problems, so fixed points can
/// be checked without approximation error.
#[derive(Debug, Clone, PartialEq)]
pub struct TableCritic {
    table: Array3<f64>,
}

impl TableCritic {
    pub fn zeros(num_states: usize, num_actions: usize, num_goals: usize) -> Self {
        TableCritic {
            table: Array3::zeros((num_states, num_actions, num_goals)),
        }
    }

    pub fn from_table(table: Array3<f64>) -> Self {
        TableCritic { table }
    }

    pub fn table(&self) -> &Array3<f64> {
        &self.table
    }

    pub fn value(&self, s: usize, a: usize, g: usize) -> f64 {
        self.table[[s, a, g]]
    }

    /// Expected binary NCE loss when positives `g ~ M(s, a, ·)` and
    /// negatives `g ~ p_marg` are presented in equal number for each
    /// `(s, a) ~ p_sa`:
    ///
    /// `-Σ p(s,a) Σ_g [M(s,a,g) ln σ(f) + p_marg(g) ln σ(-f)]`.
    ///
    /// Per entry this is minimized at `f = ln(M / p_marg)`.
    pub fn expected_nce_loss(
        &self,
        p_sa: &ArrayView2<'_, f64>,
        occupancy: &ArrayView3<'_, f64>,
        p_marg: &[f64],
    ) -> Result<(f64, Grads)> {
        let (ns, na, ng) = self.table.dim();
        if p_sa.dim() != (ns, na) || occupancy.dim() != (ns, na, ng) || p_marg.len() != ng {
            return Err(Error::shape(
                "expected_nce_loss",
                format!("({ns}, {na}, {ng})"),
                format!(
                    "{:?} / {:?} / {}",
                    p_sa.dim(),
                    occupancy.dim(),
                    p_marg.len()
                ),
            ));
        }
        let mut loss = 0.0;
        let mut grad = Array3::zeros((ns, na, ng));
        for ((s, a, g), &f) in self.table.indexed_iter() {
            let w = p_sa[[s, a]];
            let (m, q) = (occupancy[[s, a, g]], p_marg[g]);
            if m > 0.0 {
                loss -= w * m * log_sigmoid(f);
            }
            if q > 0.0 {
                loss -= w * q * log_sigmoid(-f);
            }
            grad[[s, a, g]] = -w * (m * (1.0 - sigmoid(f)) - q * sigmoid(f));
        }
        Ok((
            loss,
            Grads {
                blocks: vec![grad.iter().copied().collect()],
            },
        ))
    }

    /// Full-batch Adam on [`Self::expected_nce_loss`] with a linearly
    /// decaying step size. Returns the final loss.
    pub fn fit_expected_nce(
        &mut self,
        p_sa: &ArrayView2<'_, f64>,
        occupancy: &ArrayView3<'_, f64>,
        p_marg: &[f64],
        steps: usize,
        learning_rate: f64,
    ) -> Result<f64> {
        let mut adam = AdamState::new(self, AdamConfig::with_lr(learning_rate));
        for k in 0..steps {
            adam.config.learning_rate = learning_rate * (1.0 - k as f64 / steps as f64);
            let (_, g) = self.expected_nce_loss(p_sa, occupancy, p_marg)?;
            adam.step(self, &g)?;
        }
        Ok(self.expected_nce_loss(p_sa, occupancy, p_marg)?.0)
    }

    /// Greedy action per `(s, g)`, lowest index on ties.
    pub fn greedy_actions(&self) -> Array2<usize> {
        let (ns, na, ng) = self.table.dim();
        Array2::from_shape_fn((ns, ng), |(s, g)| {
            (1..na).fold(0, |best, a| {
                if self.table[[s, a, g]] > self.table[[s, best, g]] {
                    a
                } else {
                    best
                }
            })
        })
    }
}

impl Parameterized for TableCritic {
    fn params(&self) -> Vec<(String, &[f64])> {
        vec![(
            "table".into(),
            self.table.as_slice().expect("standard layout"),
        )]
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![self.table.shape().to_vec()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.table.as_slice_mut().expect("standard layout")]
    }
}
