//! The training loop end to end, plus evaluation, checkpoints, run
//! configuration and the metrics stream.

mod checkpoint;
mod config;
mod diag;
mod eval;
mod metrics;
mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use diag::{delta_q_rows, render_table, DeltaQRow};
pub use eval::{
    eval_episode_seed, evaluate, random_policy_return, EvalReport, MpcActor, PolicyKind, PolicyReturns, Summary,
};
pub use metrics::{read_metrics, MetricsSink};
pub use train::{episode_seed, train, ReanalyzeStats, TrainOutcome};
