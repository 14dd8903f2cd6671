//! Fixtures shared by the benchmarks.

use soul_core::harness::config::ExperimentConfig;
use soul_core::{ParamVector, Result};

/// Desk configuration shrunk to a single short round budget.
pub fn small_config(rounds: usize) -> ExperimentConfig {
    ExperimentConfig {
        rounds,
        seeds: 1,
        ..ExperimentConfig::default()
    }
    .resolved()
}

/// Two aligned parameter vectors of the desk model, one perturbed.
pub fn param_pair(cfg: &ExperimentConfig) -> Result<(ParamVector, ParamVector)> {
    let model = soul_core::Mlp::new(cfg.model.clone())?;
    let a = model.init_params_with_seed(1);
    let b = model.init_params_with_seed(2);
    Ok((a, b))
}
