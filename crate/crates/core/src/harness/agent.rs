use ndarray::{Array2, ArrayView2};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, ModelState};
use super::config::{AgentKind, ExperimentConfig};
use crate::actor::{actor_loss, offline_actor_loss, GoalPolicy};
use crate::baselines::{
    density_loss, gcbc_loss, mb_actor_loss, DensityHead, DensityModel, DEFAULT_VARIANCE_FLOOR,
};
use crate::critic::{c_learning_loss, cpc_loss, nce_loss, nce_plus_c_loss, ContrastiveCritic};
use crate::envs::{ActionSpace, EnvSpec};
use crate::numcore::{rng_stream, AdamConfig, AdamState, Grads, Parameterized, Streams};
use crate::replay::{
    sample_actor_goals, sample_mixture_batch, sample_nce_batch, sample_nce_batch_filtered,
    sample_td_batch, FilterConfig, FilterStats, GeometricSampler, TrajectoryBuffer,
};
use crate::{Error, Result};

/// Losses of one gradient step; `None` for absent components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub critic: Option<f64>,
    pub actor: f64,
}

/// Randomness consumed by gradient steps.
pub struct StepRngs<'a> {
    pub sampling: &'a mut ChaCha8Rng,
    pub noise: &'a mut ChaCha8Rng,
}

/// Every trainable network of a run with its optimizer.
#[derive(Debug, Clone)]
pub struct Agent {
    pub kind: AgentKind,
    pub spec: EnvSpec,
    pub policy: GoalPolicy,
    pub policy_opt: AdamState,
    pub critics: Vec<ContrastiveCritic>,
    pub critic_opts: Vec<AdamState>,
    pub density: Option<DensityModel>,
    pub density_opt: Option<AdamState>,
}

fn step<P: Parameterized>(model: &mut P, opt: &mut AdamState, loss: (f64, Grads)) -> Result<f64> {
    opt.step(model, &loss.1)?;
    Ok(loss.0)
}

impl Agent {
    /// Builds fresh networks from the `Init` stream. The policy is drawn
    /// first, so runs that differ only in their critics share a policy
    /// initialization.
    pub fn new(config: &ExperimentConfig, spec: &EnvSpec, num_critics: usize) -> Result<Self> {
        let mut rng = rng_stream(config.seed, Streams::Init);
        let a = &config.agent;
        let adam = AdamConfig::with_lr(a.lr);
        let act_dim = spec.action.feature_dim();
        let policy = GoalPolicy::new(
            spec.observation_dim,
            spec.goal_dim,
            &spec.action,
            &a.hidden,
            &mut rng,
        )?;
        let policy_opt = AdamState::new(&policy, adam);
        let n = if a.variant.critic_objective().is_some() {
            num_critics
        } else {
            0
        };
        let critics = (0..n)
            .map(|_| {
                ContrastiveCritic::new(
                    spec.observation_dim,
                    act_dim,
                    spec.goal_dim,
                    &a.hidden,
                    a.repr_dim,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let critic_opts = critics.iter().map(|c| AdamState::new(c, adam)).collect();
        let density = if a.variant == AgentKind::ModelBased {
            let head = match spec.action {
                ActionSpace::Discrete(_) => DensityHead::Categorical {
                    num_classes: spec.goal_dim,
                },
                ActionSpace::Continuous { .. } => DensityHead::Gaussian {
                    goal_dim: spec.goal_dim,
                    variance_floor: DEFAULT_VARIANCE_FLOOR,
                },
            };
            Some(DensityModel::new(
                spec.observation_dim,
                act_dim,
                head,
                &a.hidden,
                &mut rng,
            )?)
        } else {
            None
        };
        let density_opt = density.as_ref().map(|d| AdamState::new(d, adam));
        Ok(Agent {
            kind: a.variant,
            spec: spec.clone(),
            policy,
            policy_opt,
            critics,
            critic_opts,
            density,
            density_opt,
        })
    }

    pub fn model_states(&self) -> Vec<ModelState> {
        let mut out = vec![ModelState::capture(
            "policy",
            &self.policy,
            Some(&self.policy_opt),
        )];
        for (k, (c, o)) in self.critics.iter().zip(&self.critic_opts).enumerate() {
            out.push(ModelState::capture(&format!("critic{k}"), c, Some(o)));
        }
        if let (Some(d), Some(o)) = (&self.density, &self.density_opt) {
            out.push(ModelState::capture("density", d, Some(o)));
        }
        out
    }

    /// Copies parameters and optimizer moments from a checkpoint.
    pub fn load_models(&mut self, ckpt: &Checkpoint) -> Result<()> {
        fn load<P: Parameterized>(
            ckpt: &Checkpoint,
            name: &str,
            model: &mut P,
            opt: &mut AdamState,
        ) -> Result<()> {
            let m = ckpt.model(name)?;
            m.apply(model)?;
            if let Some(o) = &m.optimizer {
                if o.first_moment.len() != opt.first_moment.len() {
                    return Err(Error::Integrity(format!(
                        "optimizer of `{name}` has the wrong block count"
                    )));
                }
                *opt = o.clone();
            }
            Ok(())
        }
        load(ckpt, "policy", &mut self.policy, &mut self.policy_opt)?;
        for (k, (c, o)) in self
            .critics
            .iter_mut()
            .zip(&mut self.critic_opts)
            .enumerate()
        {
            load(ckpt, &format!("critic{k}"), c, o)?;
        }
        if let (Some(d), Some(o)) = (&mut self.density, &mut self.density_opt) {
            load(ckpt, "density", d, o)?;
        }
        Ok(())
    }

    fn actor_step(
        &mut self,
        config: &ExperimentConfig,
        states: &ArrayView2<'_, f64>,
        goals: &ArrayView2<'_, f64>,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        let noise = self.policy.draw_noise(states.nrows(), rng);
        let entropy = config.agent.entropy_coeff;
        let loss = match (&self.density, self.critics.first()) {
            (Some(d), _) => mb_actor_loss(&self.policy, d, states, goals, &noise.view(), entropy)?,
            (None, Some(c)) => actor_loss(&self.policy, c, states, goals, &noise.view(), entropy)?,
            (None, None) => {
                return Err(Error::Config(
                    "actor step needs a critic or density model".into(),
                ))
            }
        };
        step(&mut self.policy, &mut self.policy_opt, loss)
    }

    /// Next-state actions `a' ~ π(·|s', g)` for bootstrapped objectives.
    fn next_actions(
        &self,
        next_states: &Array2<f64>,
        goals: &Array2<f64>,
        rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>> {
        Ok(self
            .policy
            .sample_action(&next_states.view(), &goals.view(), rng)?
            .0)
    }

    /// One online gradient step: critic (or density) first, then actor.
    pub fn train_step(
        &mut self,
        config: &ExperimentConfig,
        buffer: &TrajectoryBuffer,
        filter_stats: &mut FilterStats,
        rngs: StepRngs<'_>,
    ) -> Result<StepLosses> {
        let a = &config.agent;
        let b = a.batch_size;
        let sampler = GeometricSampler::new(config.env.gamma)?;
        let gamma = config.env.gamma;
        let filter = FilterConfig {
            epsilon: a.filter_epsilon,
            enabled: a.filter_enabled,
        };
        let StepRngs { sampling, noise } = rngs;
        match self.kind {
            AgentKind::Nce | AgentKind::Cpc | AgentKind::Gcbc | AgentKind::ModelBased => {
                let batch = sample_nce_batch_filtered(
                    buffer,
                    &sampler,
                    b,
                    &filter,
                    &self.policy,
                    filter_stats,
                    sampling,
                )?;
                let (s, act, fg) = (
                    batch.states.view(),
                    batch.actions.view(),
                    batch.future_goals.view(),
                );
                if self.kind == AgentKind::Gcbc {
                    let l = gcbc_loss(&self.policy, &s, &act, &fg)?;
                    let actor = step(&mut self.policy, &mut self.policy_opt, l)?;
                    return Ok(StepLosses {
                        critic: None,
                        actor,
                    });
                }
                let critic = if let (Some(d), Some(o)) = (&mut self.density, &mut self.density_opt)
                {
                    let l = density_loss(d, &s, &act, &fg, None)?;
                    step(d, o, l)?
                } else {
                    let l = match self.kind {
                        AgentKind::Nce => nce_loss(&self.critics[0], &batch)?,
                        _ => cpc_loss(&self.critics[0], &batch, a.cpc_reg_coeff)?,
                    };
                    step(&mut self.critics[0], &mut self.critic_opts[0], l)?
                };
                let goals = sample_actor_goals(
                    buffer,
                    a.goal_source,
                    &batch.locations,
                    &sampler,
                    sampling,
                )?;
                let actor = self.actor_step(config, &s, &goals.view(), noise)?;
                Ok(StepLosses {
                    critic: Some(critic),
                    actor,
                })
            }
            AgentKind::CLearning | AgentKind::NcePlusC => {
                let mixture = if self.kind == AgentKind::NcePlusC {
                    Some(sample_mixture_batch(buffer, &sampler, b, sampling)?)
                } else {
                    None
                };
                let td = sample_td_batch(buffer, b, sampling)?;
                let next = self.next_actions(&td.next_states, &td.goals, noise)?;
                let clip = a.td_weight_clip;
                let l = match &mixture {
                    Some(m) => {
                        nce_plus_c_loss(&self.critics[0], m, &td, &next.view(), gamma, clip)?
                    }
                    None => c_learning_loss(&self.critics[0], &td, &next.view(), gamma, clip)?,
                };
                let critic = step(&mut self.critics[0], &mut self.critic_opts[0], l)?;
                let goals =
                    sample_actor_goals(buffer, a.goal_source, &td.locations, &sampler, sampling)?;
                let actor = self.actor_step(config, &td.states.view(), &goals.view(), noise)?;
                Ok(StepLosses {
                    critic: Some(critic),
                    actor,
                })
            }
        }
    }

    /// One offline gradient step on relabeled dataset triplets. Critics
    /// are fit by NCE (or CPC); the actor mixes the critic minimum with
    /// behavioral cloning of the dataset action at weight `λ`.
    pub fn offline_step(
        &mut self,
        config: &ExperimentConfig,
        buffer: &TrajectoryBuffer,
        rngs: StepRngs<'_>,
    ) -> Result<StepLosses> {
        let sampler = GeometricSampler::new(config.env.gamma)?;
        let batch = sample_nce_batch(buffer, &sampler, config.agent.batch_size, rngs.sampling)?;
        let (s, act, fg) = (
            batch.states.view(),
            batch.actions.view(),
            batch.future_goals.view(),
        );
        match self.kind {
            AgentKind::Gcbc => {
                let l = gcbc_loss(&self.policy, &s, &act, &fg)?;
                let actor = step(&mut self.policy, &mut self.policy_opt, l)?;
                Ok(StepLosses {
                    critic: None,
                    actor,
                })
            }
            AgentKind::Nce | AgentKind::Cpc => {
                let mut total = 0.0;
                for (c, o) in self.critics.iter_mut().zip(&mut self.critic_opts) {
                    let l = match self.kind {
                        AgentKind::Nce => nce_loss(c, &batch)?,
                        _ => cpc_loss(c, &batch, config.agent.cpc_reg_coeff)?,
                    };
                    total += step(c, o, l)?;
                }
                let lambda = config.offline.lambda;
                let noise = if lambda < 1.0 {
                    self.policy.draw_noise(s.nrows(), rngs.noise)
                } else {
                    Array2::zeros((s.nrows(), 0))
                };
                let l = offline_actor_loss(
                    &self.policy,
                    &self.critics,
                    &s,
                    &act,
                    &fg,
                    &noise.view(),
                    lambda,
                )?;
                let actor = step(&mut self.policy, &mut self.policy_opt, l)?;
                Ok(StepLosses {
                    critic: Some(total / self.critics.len() as f64),
                    actor,
                })
            }
            other => Err(Error::Config(format!(
                "offline training supports nce, cpc and gcbc agents, not {other}"
            ))),
        }
    }
}
