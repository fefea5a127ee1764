//! Shared fixtures for the integration suites.

use loopformer::model::ModelConfig;
use loopformer::taskgen::TaskKind;

pub const TINY_D: usize = 32;

/// Small configuration used by the fast criteria: d=32, 2 heads.
pub fn tiny_config(task: TaskKind) -> ModelConfig {
    let defaults = ModelConfig::for_task(task);
    ModelConfig {
        d: TINY_D,
        heads: 2,
        d_ff: 64,
        ..defaults
    }
}
