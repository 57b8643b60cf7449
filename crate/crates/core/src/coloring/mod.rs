//! Two-agent cooperative coloring game and REINFORCE team training.

mod env;
mod policy;
mod train;

pub use env::{observation, reward, step, ColoringState, Owner, Pixel, RewardParams, TurnOutcome};
pub use policy::{
    reinforce_update, sample_action, Action, Baseline, ColoringPolicy, TurnRecord, PIXEL_HEAD,
};
pub use train::{train_team, EpochMetrics, Pairing, TeamOptions};
