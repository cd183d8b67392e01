//! Minimal dense network engine: forward evaluation, exact reverse-mode
//! gradients, Adam and a plateau learning-rate schedule.

mod adam;
mod mlp;
mod plateau;

pub use adam::AdamState;
pub use mlp::{Activation, Dense, Mlp, MlpGrad, MlpSpec, MlpTape};
pub use plateau::PlateauScheduler;

use crate::error::Result;

/// Evaluate a network on one input.
pub fn mlp_forward(params: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    params.forward(input)
}

/// Reverse-mode gradients of `<upstream, output>`.
pub fn mlp_gradient(params: &Mlp, input: &[f64], upstream: &[f64]) -> Result<(MlpGrad, Vec<f64>)> {
    params.gradient(input, upstream)
}

/// One Adam update of a single network.
pub fn adam_step(state: &mut AdamState, params: &mut Mlp, grads: &MlpGrad) -> Result<()> {
    let g = grads.slices();
    let mut p = params.param_slices_mut();
    state.step(&mut p, &g)
}

/// Feed a metric to the scheduler and return the current rate.
pub fn plateau_update(sched: &mut PlateauScheduler, metric: f64) -> f64 {
    sched.update(metric)
}
