//! Attention-schema vision transformers and the experiments built on them:
//! attention-judgement transfer learning, a transfer-learning complexity
//! control, and a two-agent cooperative coloring game.

pub mod asnn;
pub mod attnset;
pub mod cli;
pub mod coloring;
pub mod error;
pub mod experiments;
pub mod ndcore;
pub mod parallel;

pub use error::{Error, Result};
