use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mlp::{Batch, Mlp};
use super::params::ParamVector;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Plain SGD (no momentum) with coupled L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_episodes: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            weight_decay: 4e-5,
            batch_size: 32,
            local_episodes: 2,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `θ' = θ − η (g + λ θ)`, elementwise.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, cfg: &SgdConfig) -> Result<ParamVector> {
    let (eta, lambda) = (cfg.learning_rate, cfg.weight_decay);
    params.zip_map(grad, |t, g| t - eta * (g + lambda * t))
}

/// `local_episodes` passes over `data` in shuffled mini-batches. The last
/// short batch of each pass is kept.
pub fn local_train(
    model: &Mlp,
    params: &ParamVector,
    data: &Dataset,
    cfg: &SgdConfig,
    shuffle_seed: u64,
) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut theta = params.clone();
    let mut rng = seed::rng(shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.local_episodes {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::new(
                data.inputs.select_rows(chunk),
                chunk.iter().map(|&i| data.labels[i]).collect(),
            )?;
            let grad = model.gradient(&theta, &batch)?;
            theta = sgd_step(&theta, &grad, cfg)?;
        }
    }
    Ok(theta)
}
