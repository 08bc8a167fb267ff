//! Batch Q-learning over [`ThetaParams`].

mod replay;
mod train;
mod update;

pub use replay::{ReplayBuffer, Transition, sample_sequences};
pub use train::{LogRow, Schedule, Snapshot, TdSample, TrainOutput, TrainSeeds, evaluate_policy, train};
pub use update::{UpdateConfig, UpdateDiagnostics, update_objective, update_step};

use nalgebra::DVector;

use crate::approximator::{ThetaParams, evaluate_q, evaluate_v, grad_q_theta};
use crate::error::{Error, Result};
use crate::qp::{PrimalDualSolution, QpSettings};

/// `cost + gamma V(s+) - Q(s, a)` together with the action-value solution.
fn td_with_solution(
    theta: &ThetaParams,
    t: &Transition,
    gamma: f64,
    settings: &QpSettings,
) -> Result<(f64, PrimalDualSolution)> {
    let q = evaluate_q(theta, &t.s, &t.a, settings)?;
    if !q.is_optimal() {
        return Err(Error::NonOptimal(q.solution.status));
    }
    let v = evaluate_v(theta, &t.s_next, settings)?;
    if !v.is_optimal() {
        return Err(Error::NonOptimal(v.solution.status));
    }
    Ok((t.cost + gamma * v.value - q.value, q.solution))
}

pub fn td_error(theta: &ThetaParams, t: &Transition, gamma: f64, settings: &QpSettings) -> Result<f64> {
    td_with_solution(theta, t, gamma, settings).map(|(d, _)| d)
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// Mean of `delta * dQ/dtheta` over the transitions that were not skipped.
    pub gradient: DVector<f64>,
    /// Per-transition TD error, `None` where the transition was skipped.
    pub td_errors: Vec<Option<f64>>,
    pub skipped: usize,
}

impl BatchGradient {
    pub fn td_mean(&self) -> f64 {
        let used: Vec<f64> = self.td_errors.iter().flatten().copied().collect();
        used.iter().sum::<f64>() / used.len() as f64
    }
}

/// Transitions whose QPs are not solved to optimality are skipped and counted.
pub fn batch_gradient(
    theta: &ThetaParams,
    batch: &[Transition],
    gamma: f64,
    settings: &QpSettings,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sum = DVector::zeros(theta.n_trainable());
    let mut td_errors = Vec::with_capacity(batch.len());
    let mut used = 0usize;
    for t in batch {
        let sample = td_with_solution(theta, t, gamma, settings)
            .and_then(|(delta, sol)| grad_q_theta(theta, &t.s, &t.a, &sol).map(|g| (delta, g)));
        match sample {
            Ok((delta, g)) => {
                sum.axpy(delta, &g.values, 1.0);
                td_errors.push(Some(delta));
                used += 1;
            }
            Err(Error::NonOptimal(_)) => td_errors.push(None),
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(BatchGradient {
        gradient: sum / used as f64,
        skipped: batch.len() - used,
        td_errors,
    })
}
