//! Trajectory storage and every sampler the learners draw from.
//!
//! Positive future states are drawn from the discounted state occupancy by a
//! geometric time offset `Δ ≥ 1`; negatives are never sampled explicitly,
//! the critic losses reuse other rows' positives.

mod buffer;
mod dataset;
mod filter;
mod sampler;

pub use buffer::{Location, Trajectory, TrajectoryBuffer};
pub use dataset::{read_dataset, sidecar_path, write_dataset, DatasetMeta, DATASET_VERSION};
pub use filter::{
    count_kept, filter_predicate, sample_nce_batch_filtered, FilterConfig, FilterDecision,
    FilterStats, GoalConditionedLikelihood,
};
pub use sampler::{
    next_state_branch_probability, sample_actor_goals, sample_mixture_batch, sample_nce_batch,
    sample_random_goals, sample_td_batch, GeometricSampler, GoalSource, MixtureBatch, NceBatch,
    TdBatch,
};
