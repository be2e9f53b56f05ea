/// Anything owning a flat list of named real parameter blocks.
///
/// The block order of [`Parameterized::params`] and
/// [`Parameterized::params_mut`] must agree, and [`Grads`] produced for the
/// model use the same order.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &[f64])>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    /// Logical shape of each block; flat by default.
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|(_, p)| vec![p.len()]).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Gradient blocks aligned with a model's parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub blocks: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like<P: Parameterized + ?Sized>(model: &P) -> Self {
        Grads {
            blocks: model
                .params()
                .iter()
                .map(|(_, p)| vec![0.0; p.len()])
                .collect(),
        }
    }

    pub fn concat(parts: Vec<Grads>) -> Self {
        Grads {
            blocks: parts.into_iter().flat_map(|g| g.blocks).collect(),
        }
    }

    /// Splits off the first `n` blocks, returning `(head, tail)`.
    pub fn split_at(mut self, n: usize) -> (Grads, Grads) {
        let tail = self.blocks.split_off(n);
        (self, Grads { blocks: tail })
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.blocks.iter_mut().flatten() {
            *v *= factor;
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Grads, factor: f64) {
        assert_eq!(
            self.blocks.len(),
            other.blocks.len(),
            "gradient block count"
        );
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            assert_eq!(a.len(), b.len(), "gradient block length");
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }
}
