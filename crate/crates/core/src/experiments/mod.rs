//! Experiment orchestration and the statistics engine.

mod config;
pub mod dist;
mod exp1;
mod exp2;
mod exp3;
mod pool;
mod results;
mod stats;

pub use config::{DataConfig, Exp1Config, Exp2Config, Exp3Config, Scale, Settings};
pub use exp1::*;
pub use exp2::*;
pub use exp3::*;
pub use pool::{
    assignment, assignment_tasks, build_pool, pretrain, repetition_seed, task_data, Pool,
    Pretrained, TaskData,
};
pub use results::*;
pub use stats::{anova_2x2, mean_sem, t_test, Anova2x2, StatResult, SumsOfSquares};
