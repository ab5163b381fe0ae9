//! Seeded end-to-end runs: configuration, training loop and output files.

mod config;
mod metrics;
mod run;

pub use crate::ppo::Record;
pub use config::{ArithmeticConfig, BanditConfig, Mode, RunConfig, Task, MAX_CONFIG_SEED};
pub use metrics::{
    read_metrics, record_line, smooth, tail_mean, write_plotdata, write_summary, MetricsWriter,
    Series,
};
pub use run::{
    arithmetic_eval_episodes, bandit_record, eval_record, evaluate_episodes, modal_final_answer,
    resolve, sweep, sweep_dir_name, train, RunOptions, RunOutcome, CHECKPOINT_FILE, METRICS_FILE,
    PLOTDATA_FILE, SUMMARY_FILE,
};
