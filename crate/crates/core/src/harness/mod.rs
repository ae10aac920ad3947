//! Experiment files, presets and the report writer behind the `raresim` binary.
//!
//! An experiment is a TOML file:
//!
//! ```toml
//! schema_version = 1
//! methods = ["plain", "two_stage"]
//! samples = 100000
//! seed = 7
//! output = "out/heston"
//!
//! [model]
//! preset = "heston-t1"
//!
//! [event]
//! kind = "tail"
//! steps = 10
//! b_over_s0 = 1.12
//! ```
//!
//! A run writes `summary.csv`, one `<method>.json` per method, `sweep.csv`
//! when a `[sweep]` block is present, and `manifest.json`.

mod config;
mod run;

pub use config::{
    resolve_event, CovarSettings, EventConfig, ExperimentConfig, Method, ModelConfig, ModelParams, Sweep, PRESETS,
    SCHEMA_VERSION,
};
pub use run::{run_experiment, RunReport};
