//! Shared inputs for the benchmarks.

use taskforest::config::RunConfig;
use taskforest::synthetic::{planted_log, PlantedLog, PlantedSpec};
use taskforest::ModelConfig;

/// Model settings from `configs/planted.conf`.
pub fn planted_model() -> ModelConfig {
    RunConfig::from_text(include_str!("../../../configs/planted.conf"))
        .expect("bundled config parses")
        .model
}

/// A planted log with `tasks` tasks of 5 subtasks of 10 queries each.
pub fn planted(tasks: usize, reference_sessions: usize) -> PlantedLog {
    planted_log(&PlantedSpec {
        tasks,
        subtasks_per_task: 5,
        queries_per_subtask: 10,
        reference_sessions_per_subtask: reference_sessions,
        ..PlantedSpec::default()
    })
}
