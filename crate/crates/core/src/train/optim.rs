use crate::nn::Param;

use super::TrainError;

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Param]) -> Self {
        Self { velocity: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect() }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`, then clears the gradients.
pub fn sgd_step(
    params: &mut [Param],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if params.len() != state.velocity.len() {
        return Err(TrainError::Optimizer(format!(
            "{} parameters but {} velocity buffers",
            params.len(),
            state.velocity.len()
        )));
    }
    for (param, v) in params.iter().zip(&state.velocity) {
        if param.tensor.numel() != v.len() {
            return Err(TrainError::Optimizer(format!("velocity of {} has the wrong size", param.name)));
        }
        if param.tensor.grad().is_none() {
            return Err(TrainError::Optimizer(format!("{} has no gradient", param.name)));
        }
    }
    for (param, v) in params.iter_mut().zip(&mut state.velocity) {
        let grad = param.tensor.grad().expect("checked above").to_vec();
        for ((p, vi), g) in param.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = momentum * *vi + (g + weight_decay * *p);
            *p -= lr * *vi;
        }
        param.tensor.zero_grad();
    }
    Ok(())
}
