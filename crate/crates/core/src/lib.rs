//! Contrastive goal-conditioned reinforcement learning.
//!
//! A critic `f(s, a, g) = φ(s, a)ᵀ ψ(g)` is trained to classify future states
//! of a trajectory against random states; its logits then serve as a
//! (log-scaled) goal-conditioned Q-function for a stochastic actor. The
//! [`oracle`] module computes exact tabular occupancies and Q-values so the
//! identities behind the method can be checked numerically.

pub mod actor;
pub mod analysis;
pub mod baselines;
pub mod critic;
pub mod envs;
pub mod error;
pub mod harness;
pub mod numcore;
pub mod oracle;
pub mod replay;

pub use error::{Error, Result};
