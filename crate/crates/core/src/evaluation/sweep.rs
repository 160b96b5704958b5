use rayon::prelude::*;
use serde::Serialize;

use super::{evaluate_model, mean_std};
use crate::error::{Error, Result};
use crate::federation::ClientState;
use crate::mixing::{self, LambdaAssignment, MixScheme};
use crate::nn::WeightVector;

/// `{0, 1/n, …, 1}` with `n = round(1 / step)`, so both endpoints are exact.
pub fn lambda_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round().max(1.0) as usize;
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub top1: f64,
    pub loss: f64,
    pub ece: f64,
    pub mce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientSweep {
    pub client_id: usize,
    /// False when the client never trained a local model; it then only has
    /// the λ = 0 point.
    pub has_local: bool,
    pub points: Vec<SweepPoint>,
}

impl ClientSweep {
    pub fn at(&self, lambda: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.lambda == lambda)
    }
}

/// Cross-client statistics at one grid value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepAggregate {
    pub lambda: f64,
    pub clients: usize,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub ece_mean: f64,
    pub mce_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaSweep {
    pub grid: Vec<f64>,
    pub clients: Vec<ClientSweep>,
    pub aggregates: Vec<SweepAggregate>,
}

impl LambdaSweep {
    pub fn aggregate_at(&self, lambda: f64) -> Option<&SweepAggregate> {
        self.aggregates.iter().find(|a| a.lambda == lambda)
    }

    /// Population std over the grid of the cross-client mean top-1; small
    /// values mean a flat accuracy profile along the mixing line.
    pub fn cross_grid_std(&self) -> f64 {
        let means: Vec<f64> = self.aggregates.iter().map(|a| a.top1_mean).collect();
        mean_std(&means).1
    }

    /// Ids of clients evaluated at λ = 0 only.
    pub fn flagged(&self) -> Vec<usize> {
        self.clients
            .iter()
            .filter(|c| !c.has_local)
            .map(|c| c.client_id)
            .collect()
    }
}

/// Evaluates `mix(w_g, w_l_i, λ)` on each client's test split for every grid
/// value. The same λ is applied to every layer.
pub fn lambda_sweep(
    clients: &[ClientState],
    w_g: &WeightVector,
    grid: &[f64],
    bins: usize,
) -> Result<LambdaSweep> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty λ grid".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidInput(format!("λ grid value {bad} outside [0, 1]")));
    }
    let layers = w_g.layer_count();
    let per_client: Vec<ClientSweep> = clients
        .par_iter()
        .map(|c| -> Result<ClientSweep> {
            let test = &c.split.test;
            let point = |lambda: f64, w: &WeightVector| -> Result<SweepPoint> {
                let e = evaluate_model(w, test, bins)?;
                Ok(SweepPoint {
                    lambda,
                    top1: e.top1,
                    loss: e.loss,
                    ece: e.ece,
                    mce: e.mce,
                })
            };
            let points = match c.local_model() {
                Some(w_l) => grid
                    .iter()
                    .map(|&lambda| {
                        let lam = LambdaAssignment::constant(MixScheme::ModelMixing, lambda, layers)?;
                        point(lambda, &mixing::mix(w_g, w_l, &lam)?)
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => vec![point(0.0, w_g)?],
            };
            Ok(ClientSweep {
                client_id: c.id,
                has_local: c.local_model().is_some(),
                points,
            })
        })
        .collect::<Result<_>>()?;

    let aggregates = grid
        .iter()
        .map(|&lambda| {
            let pts: Vec<&SweepPoint> = per_client.iter().filter_map(|c| c.at(lambda)).collect();
            let col = |f: fn(&SweepPoint) -> f64| pts.iter().map(|p| f(p)).collect::<Vec<_>>();
            let (top1_mean, top1_std) = mean_std(&col(|p| p.top1));
            let (loss_mean, loss_std) = mean_std(&col(|p| p.loss));
            SweepAggregate {
                lambda,
                clients: pts.len(),
                top1_mean,
                top1_std,
                loss_mean,
                loss_std,
                ece_mean: mean_std(&col(|p| p.ece)).0,
                mce_mean: mean_std(&col(|p| p.mce)).0,
            }
        })
        .collect();

    Ok(LambdaSweep {
        grid: grid.to_vec(),
        clients: per_client,
        aggregates,
    })
}

/// Headline: one λ shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SharedBest {
    pub lambda: f64,
    pub top1_mean: f64,
    pub top1_std: f64,
}

/// Each client picks its own best λ (lowest on ties).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerClientBest {
    pub lambdas: Vec<(usize, f64)>,
    pub top1_mean: f64,
    pub top1_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestAverage {
    pub shared: SharedBest,
    pub per_client: PerClientBest,
}

/// Grid value maximizing the cross-client mean top-1, lowest λ on ties.
pub fn best_average(sweep: &LambdaSweep) -> Result<BestAverage> {
    let mut best: Option<&SweepAggregate> = None;
    for a in sweep.aggregates.iter().filter(|a| a.clients > 0) {
        let better = match best {
            None => true,
            Some(b) => a.top1_mean > b.top1_mean || (a.top1_mean == b.top1_mean && a.lambda < b.lambda),
        };
        if better {
            best = Some(a);
        }
    }
    let Some(b) = best else {
        return Err(Error::InvalidInput("best_average of an empty sweep".into()));
    };

    let mut lambdas = Vec::with_capacity(sweep.clients.len());
    let mut accs = Vec::with_capacity(sweep.clients.len());
    for c in &sweep.clients {
        let mut top: Option<&SweepPoint> = None;
        for p in &c.points {
            let better = match top {
                None => true,
                Some(t) => p.top1 > t.top1 || (p.top1 == t.top1 && p.lambda < t.lambda),
            };
            if better {
                top = Some(p);
            }
        }
        if let Some(t) = top {
            lambdas.push((c.client_id, t.lambda));
            accs.push(t.top1);
        }
    }
    let (top1_mean, top1_std) = mean_std(&accs);
    Ok(BestAverage {
        shared: SharedBest {
            lambda: b.lambda,
            top1_mean: b.top1_mean,
            top1_std: b.top1_std,
        },
        per_client: PerClientBest {
            lambdas,
            top1_mean,
            top1_std,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep_from(means: &[f64]) -> LambdaSweep {
        let grid = lambda_grid(1.0 / (means.len() - 1) as f64);
        let points: Vec<SweepPoint> = grid
            .iter()
            .zip(means)
            .map(|(&lambda, &top1)| SweepPoint {
                lambda,
                top1,
                loss: 0.0,
                ece: 0.0,
                mce: 0.0,
            })
            .collect();
        let aggregates = points
            .iter()
            .map(|p| SweepAggregate {
                lambda: p.lambda,
                clients: 1,
                top1_mean: p.top1,
                top1_std: 0.0,
                loss_mean: 0.0,
                loss_std: 0.0,
                ece_mean: 0.0,
                mce_mean: 0.0,
            })
            .collect();
        LambdaSweep {
            grid,
            clients: vec![ClientSweep {
                client_id: 0,
                has_local: true,
                points,
            }],
            aggregates,
        }
    }

    #[test]
    fn grid_has_exact_endpoints() {
        let g = lambda_grid(0.1);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 1.0);
        assert_eq!(g[5], 0.5);
    }

    #[test]
    fn constant_sweep_picks_zero() {
        let b = best_average(&sweep_from(&[0.7; 11])).unwrap();
        assert_eq!(b.shared.lambda, 0.0);
        assert_eq!(b.per_client.lambdas, vec![(0, 0.0)]);
    }

    #[test]
    fn peak_is_found() {
        let means: Vec<f64> = (0..11).map(|i| 1.0 - (i as f64 - 5.0).abs() / 10.0).collect();
        let b = best_average(&sweep_from(&means)).unwrap();
        assert_eq!(b.shared.lambda, 0.5);
        assert_eq!(b.shared.top1_mean, 1.0);
    }

    #[test]
    fn cross_grid_std_of_flat_profile_is_zero() {
        assert!(sweep_from(&[0.4; 11]).cross_grid_std() < 1e-15);
        assert!(sweep_from(&[0.0, 1.0]).cross_grid_std() > 0.49);
    }
}
