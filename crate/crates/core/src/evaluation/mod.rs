//! Accuracy, calibration, the λ subspace sweep and the loss-plane probe.

mod metrics;
mod plane;
mod sweep;

pub use metrics::{
    calibration_errors, evaluate_model, top_k_accuracy, true_label_rank, CalibrationBin,
    CalibrationBins, CalibrationReport, ModelEval,
};
pub use plane::{plane_probe, regularized_loss, PlaneGrid, PlaneNode};
pub use sweep::{
    best_average, lambda_grid, lambda_sweep, BestAverage, ClientSweep, LambdaSweep,
    PerClientBest, SharedBest, SweepAggregate, SweepPoint,
};

use crate::error::Result;
use crate::federation::{ClientState, RoundEval};
use crate::nn::WeightVector;

/// Mean over all clients of the global model's test top-1 and loss.
pub fn global_round_eval(global: &WeightVector, clients: &[ClientState]) -> Result<RoundEval> {
    let mut top1 = 0.0;
    let mut loss = 0.0;
    for c in clients {
        let e = evaluate_model(global, &c.split.test, 10)?;
        top1 += e.top1;
        loss += e.loss;
    }
    let n = clients.len().max(1) as f64;
    Ok(RoundEval {
        top1: top1 / n,
        loss: loss / n,
    })
}

/// Population mean and standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
