//! Gradient descent with multiplicative step adaptation, shared by the flow
//! estimator and the cycle refiner.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::abs;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Schedule {
    pub max_evals: usize,
    pub step: f64,
    /// Multiplier applied after a rejected step.
    pub decay: f64,
    /// Multiplier applied after an accepted step.
    pub growth: f64,
    /// Stop once an accepted step improves the loss by less than this
    /// relative amount.
    pub tol: f64,
}

pub(crate) struct Outcome<P> {
    pub params: P,
    /// Loss after every accepted step, starting with the initial loss.
    pub trace: Vec<f64>,
}

/// Minimizes `eval` starting at `init`. A candidate `apply(params, grad,
/// step)` is accepted only if it strictly lowers the loss, so the trace is
/// non-increasing. `diverged(iteration)` builds the error for a non-finite
/// loss.
pub(crate) fn minimize<P, G>(
    init: P,
    schedule: Schedule,
    mut eval: impl FnMut(&P) -> Result<(f64, G)>,
    mut apply: impl FnMut(&P, &G, f64) -> P,
    diverged: impl Fn(usize) -> Error,
) -> Result<Outcome<P>> {
    let (mut loss, mut grad) = eval(&init)?;
    if !loss.is_finite() {
        return Err(diverged(0));
    }
    let mut params = init;
    let mut trace = Vec::new();
    trace.push(loss);
    let mut step = schedule.step;
    let min_step = schedule.step * 1e-6;
    for iteration in 1..=schedule.max_evals {
        if loss == 0.0 || step < min_step {
            break;
        }
        let candidate = apply(&params, &grad, step);
        let (c_loss, c_grad) = eval(&candidate)?;
        if !c_loss.is_finite() {
            return Err(diverged(iteration));
        }
        if c_loss < loss {
            let rel = abs(loss - c_loss) / loss;
            params = candidate;
            loss = c_loss;
            grad = c_grad;
            trace.push(loss);
            step *= schedule.growth;
            if rel < schedule.tol {
                break;
            }
        } else {
            step *= schedule.decay;
        }
    }
    Ok(Outcome { params, trace })
}
