//! Adam with bias correction, and plain SGD for comparison.

use serde::{Deserialize, Serialize};

use super::{Matrix, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
}

impl OptimizerState {
    /// Fresh state whose accumulators mirror `shapes`.
    pub fn new(config: OptimizerConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = |shapes: &[(usize, usize)]| {
            shapes
                .iter()
                .map(|&(r, c)| Matrix::zeros(r, c))
                .collect::<Vec<_>>()
        };
        let (first_moment, second_moment) = match config.kind {
            OptimizerKind::Adam => (zeros(shapes), zeros(shapes)),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            config,
            step: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn for_params<P: Parameters>(config: OptimizerConfig, params: &P) -> Self {
        Self::new(config, &params.shapes())
    }

    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut p = params.tensors_mut();
        let g = grads.tensors();
        adam_step(&mut p, &g, self)
    }
}

/// One optimizer update in place. Despite the name this also handles the SGD
/// configuration, so callers switch optimizers through the config alone.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "optimizer got {} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if !p.same_shape(g) {
            return Err(Error::shape("optimizer step", p.shape(), g.shape()));
        }
    }
    let cfg = state.config;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                p.add_scaled(g, -cfg.lr)?;
            }
        }
        OptimizerKind::Adam => {
            if state.first_moment.len() != params.len() {
                return Err(Error::invalid(format!(
                    "optimizer state tracks {} tensors, got {}",
                    state.first_moment.len(),
                    params.len()
                )));
            }
            for ((p, m), v) in params
                .iter()
                .zip(&state.first_moment)
                .zip(&state.second_moment)
            {
                if !p.same_shape(m) || !p.same_shape(v) {
                    return Err(Error::shape("optimizer state", p.shape(), m.shape()));
                }
            }
            let t = (state.step + 1) as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let m = state.first_moment[i].as_mut_slice();
                let v = state.second_moment[i].as_mut_slice();
                for (((w, &gj), mj), vj) in
                    p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v)
                {
                    *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
                    *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
                    let mhat = *mj / bc1;
                    let vhat = *vj / bc2;
                    *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                }
            }
        }
    }
    state.step += 1;
    Ok(())
}
