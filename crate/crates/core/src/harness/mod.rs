//! Synthetic tasks, policy evaluation, and parameter sweeps.

pub mod eval;
pub mod sweep;
pub mod tasks;

pub use eval::{evaluate, evaluate_task, EvalResult, TaskRecord};
pub use sweep::{sweep, sweep_csv, SweepOutcome, SweepPoint, CSV_HEADER};
pub use tasks::{
    gen_copy_task, gen_kv_lookup_task, training_example, Metric, Task, TaskKind, TaskMix,
};
