//! Server round loop and client local update.
//!
//! Each round the server samples clients without replacement, broadcasts
//! the global model, lets every selected client run its local update
//! (serially or on the rayon pool), and replaces the global model with the
//! sample-size-weighted mean of the returned federated models. Local models
//! stay inside [`ClientState`] and are never handed to the server.
//!
//! All randomness is drawn from streams named by `(seed, purpose, client,
//! round)`, so the serial and parallel schedules give identical results.

use std::time::{Duration, Instant};

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientSplit;
use crate::error::{Error, Result};
use crate::evaluation::{self, LambdaSweep};
use crate::mixing::{self, MixScheme, PenaltyMode, RegularizerConfig};
use crate::nn::{self, OptimizerState, WeightVector};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalInit {
    /// Fresh random initialization from the client's own stream.
    FreshRandom,
    /// Start the local model as a copy of the received global model.
    CopyGlobal,
}

/// Protocol hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    /// First round in which λ is sampled; before it λ is 0.
    pub personalization_start: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub client_count: usize,
    pub fraction: f64,
    pub eta0: f64,
    pub mu: f64,
    pub nu: f64,
    pub scheme: MixScheme,
    pub seed: u64,
    pub local_init: LocalInit,
    pub momentum: f64,
    pub weight_decay: f64,
    pub penalty_mode: PenaltyMode,
    /// Run selected clients on the rayon pool.
    pub parallel: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            personalization_start: 20,
            batch_size: 10,
            local_epochs: 5,
            client_count: 50,
            fraction: 0.1,
            eta0: 0.01,
            mu: 0.01,
            nu: 2.0,
            scheme: MixScheme::ModelMixing,
            seed: 0,
            local_init: LocalInit::FreshRandom,
            momentum: nn::DEFAULT_MOMENTUM,
            weight_decay: nn::DEFAULT_WEIGHT_DECAY,
            penalty_mode: PenaltyMode::Global,
            parallel: true,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.rounds < 1 {
            return bad("rounds", "R must be >= 1".into());
        }
        if self.personalization_start > self.rounds {
            return bad(
                "personalization_start",
                format!(
                    "L ({}) must not exceed rounds R ({})",
                    self.personalization_start, self.rounds
                ),
            );
        }
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("local_epochs", self.local_epochs),
            ("clients", self.client_count),
        ] {
            if v < 1 {
                return bad(field, format!("must be >= 1, got {v}"));
            }
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad("fraction", format!("C must be in (0, 1], got {}", self.fraction));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad("lr", format!("must be > 0, got {}", self.eta0));
        }
        for (field, v) in [
            ("mu", self.mu),
            ("nu", self.nu),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, format!("must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn regularizer(&self) -> Result<RegularizerConfig> {
        Ok(RegularizerConfig::new(self.mu, self.nu)?.with_penalty_mode(self.penalty_mode))
    }

    /// True when λ is never sampled and both penalties that couple the
    /// models are off, i.e. plain FedAvg.
    pub fn is_fedavg_reduction(&self) -> bool {
        self.personalization_start >= self.rounds && self.mu == 0.0 && self.nu == 0.0
    }

    /// λ never sampled, ν = 0, μ > 0: FedProx.
    pub fn is_fedprox_reduction(&self) -> bool {
        self.personalization_start >= self.rounds && self.mu > 0.0 && self.nu == 0.0
    }
}

/// A client's data and its private local model.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub split: ClientSplit,
    local_model: Option<WeightVector>,
}

impl ClientState {
    pub fn new(split: ClientSplit) -> Self {
        Self {
            id: split.client_id,
            split,
            local_model: None,
        }
    }

    pub fn local_model(&self) -> Option<&WeightVector> {
        self.local_model.as_ref()
    }

    /// Overrides the local model, e.g. when restoring from a checkpoint.
    pub fn set_local_model(&mut self, w: WeightVector) {
        self.local_model = Some(w);
    }

    pub fn n_train(&self) -> usize {
        self.split.train.len()
    }
}

/// What a client sends back after a local update.
#[derive(Debug, Clone)]
pub struct ClientUpload {
    pub client_id: usize,
    pub federated: WeightVector,
    pub n_samples: usize,
    pub mean_loss: f64,
}

/// Number of clients sampled per round: `max(floor(C * K), 1)`.
pub fn selection_size(client_count: usize, fraction: f64) -> usize {
    // tolerate products like 0.07 * 100 = 7.000000000000001 and 0.29 * 100 = 28.999999999999996
    let m = (fraction * client_count as f64 + 1e-9).floor() as usize;
    m.clamp(1, client_count)
}

/// Uniform sample without replacement, returned in ascending id order.
pub fn select_clients<R: Rng + ?Sized>(rng: &mut R, client_count: usize, fraction: f64) -> Vec<usize> {
    let m = selection_size(client_count, fraction);
    let mut ids = rand::seq::index::sample(rng, client_count, m).into_vec();
    ids.sort_unstable();
    ids
}

/// Selection for `round` under `seed`.
pub fn select_for_round(seed: u64, client_count: usize, fraction: f64, round: usize) -> Vec<usize> {
    select_clients(
        &mut stream(seed, Purpose::ClientSelection, 0, round as u64),
        client_count,
        fraction,
    )
}

fn fresh_local_model(cfg: &FedConfig, client: usize, w_g: &WeightVector) -> WeightVector {
    match cfg.local_init {
        LocalInit::FreshRandom => WeightVector::init_uniform(
            &w_g.spec(),
            &mut stream(cfg.seed, Purpose::LocalInit, client as u64, 0),
        ),
        LocalInit::CopyGlobal => w_g.clone(),
    }
}

/// One client's joint training of its federated and local models.
///
/// Returns only the federated model, the training-set size and the mean
/// mini-batch loss; the local model is written back into `client`.
pub fn local_update(
    client: &mut ClientState,
    w_g: &WeightVector,
    cfg: &FedConfig,
    round: usize,
) -> Result<ClientUpload> {
    let train = &client.split.train;
    if train.is_empty() {
        return Err(Error::InvalidInput(format!("client {} has no training data", client.id)));
    }
    if train.dims() != w_g.layer_dims()[0] {
        return Err(Error::shape("client features", w_g.layer_dims()[0], train.dims()));
    }
    let reg = cfg.regularizer()?;
    let layers = w_g.layer_count();
    let id = client.id;

    let mut w_f = w_g.clone();
    let mut w_l = match &client.local_model {
        Some(w) => {
            w.check_shape(w_g, "local model")?;
            w.clone()
        }
        None => fresh_local_model(cfg, id, w_g),
    };
    let mut opt_f = OptimizerState::new(&w_f, cfg.momentum, cfg.weight_decay);
    let mut opt_l = OptimizerState::new(&w_l, cfg.momentum, cfg.weight_decay);
    let lr = nn::lr_at_round(cfg.eta0, round);

    let mut shuffle_rng = stream(cfg.seed, Purpose::Shuffle, id as u64, round as u64);
    let mut lambda_rng = stream(cfg.seed, Purpose::Lambda, id as u64, round as u64);
    let non_finite = |what, batch| Error::NonFinite {
        what,
        round,
        client: id,
        batch: Some(batch),
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut loss_sum, mut batches) = (0.0, 0usize);
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = batches;
            let x = train.features().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();

            let lam = mixing::sample_lambda(
                &mut lambda_rng,
                cfg.scheme,
                round,
                cfg.personalization_start,
                layers,
            );
            let mixed = mixing::mix(&w_f, &w_l, &lam)?;
            let (_, trace) = nn::forward(&mixed, &x)?;
            let (loss, task_grad) = nn::loss_and_grad(&mixed, trace, &y)?;
            if !loss.is_finite() {
                return Err(non_finite("loss", batch));
            }
            let (grad_f, grad_l) =
                mixing::assemble_gradients(&task_grad, &lam, &w_f, &w_l, w_g, &reg)?;
            let step = |w: &mut WeightVector, g: &WeightVector, st: &mut OptimizerState| {
                nn::sgd_step(w, g, st, lr).map_err(|e| match e {
                    Error::NonFiniteGradient => non_finite("gradient", batch),
                    other => other,
                })
            };
            step(&mut w_f, &grad_f, &mut opt_f)?;
            step(&mut w_l, &grad_l, &mut opt_l)?;
            loss_sum += loss;
            batches += 1;
        }
    }
    client.local_model = Some(w_l);
    Ok(ClientUpload {
        client_id: id,
        federated: w_f,
        n_samples: train.len(),
        mean_loss: loss_sum / batches as f64,
    })
}

/// `n_i / Σ n_j`.
pub fn aggregation_weights(n_samples: &[usize]) -> Vec<f64> {
    let total: usize = n_samples.iter().sum();
    n_samples.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Sample-size-weighted mean of the uploaded federated models, summed in
/// ascending client-id order.
pub fn aggregate(uploads: &[ClientUpload]) -> Result<WeightVector> {
    if uploads.is_empty() {
        return Err(Error::Protocol("aggregation over an empty set of clients".into()));
    }
    let mut sorted: Vec<&ClientUpload> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let pairs: Vec<(&WeightVector, usize)> =
        sorted.iter().map(|u| (&u.federated, u.n_samples)).collect();
    weighted_mean(&pairs)
}

/// Weighted mean in the given order.
pub fn weighted_mean(models: &[(&WeightVector, usize)]) -> Result<WeightVector> {
    let Some(&(first, _)) = models.first() else {
        return Err(Error::Protocol("aggregation over an empty set of clients".into()));
    };
    if let Some((_, n)) = models.iter().find(|(_, n)| *n == 0) {
        return Err(Error::Protocol(format!("client reported n_i = {n}")));
    }
    let ns: Vec<usize> = models.iter().map(|&(_, n)| n).collect();
    let mut out = WeightVector::zeros(&first.spec());
    for (&(w, _), weight) in models.iter().zip(aggregation_weights(&ns)) {
        first.check_shape(w, "aggregate")?;
        out.add_scaled(weight, w);
    }
    Ok(out)
}

/// Global-model metrics recorded on scheduled rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundEval {
    /// Mean over all clients of top-1 accuracy on their test split.
    pub top1: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub mean_train_loss: f64,
    pub wall_time: Duration,
    pub eval: Option<RoundEval>,
    pub bytes_down: usize,
    pub bytes_up: usize,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: WeightVector,
    /// Number of completed rounds.
    pub round: usize,
    pub history: Vec<RoundRecord>,
}

/// When and how the run is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan {
    /// Evaluate the global model after every `every`-th round; 0 disables.
    pub every: usize,
    pub lambda_grid: Vec<f64>,
    pub calibration_bins: usize,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            every: 0,
            lambda_grid: evaluation::lambda_grid(0.1),
            calibration_bins: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub server: ServerState,
    /// Final all-client λ sweep; `None` when no round ran.
    pub sweep: Option<LambdaSweep>,
}

/// A run that stopped early, with everything completed before the failure.
#[derive(Debug, thiserror::Error)]
#[error("run aborted after {} completed rounds: {error}", .partial.round)]
pub struct RunFailure {
    #[source]
    pub error: Error,
    pub partial: ServerState,
}

/// Read-only view handed to a round observer after each aggregation.
pub struct RoundView<'a> {
    pub record: &'a RoundRecord,
    pub global: &'a WeightVector,
    pub uploads: &'a [ClientUpload],
    pub clients: &'a [ClientState],
}

/// Runs `cfg.rounds` rounds starting from `initial`.
pub fn run(
    cfg: &FedConfig,
    clients: &mut [ClientState],
    initial: WeightVector,
    plan: &EvalPlan,
) -> std::result::Result<RunOutput, RunFailure> {
    run_with_observer(cfg, clients, initial, plan, |_| {})
}

pub fn run_with_observer(
    cfg: &FedConfig,
    clients: &mut [ClientState],
    initial: WeightVector,
    plan: &EvalPlan,
    mut observe: impl FnMut(&RoundView<'_>),
) -> std::result::Result<RunOutput, RunFailure> {
    let mut server = ServerState {
        global: initial,
        round: 0,
        history: Vec::with_capacity(cfg.rounds),
    };
    macro_rules! bail {
        ($e:expr) => {
            return Err(RunFailure {
                error: $e,
                partial: server,
            })
        };
    }
    if let Err(e) = cfg.validate() {
        bail!(e);
    }
    if clients.len() != cfg.client_count || clients.iter().enumerate().any(|(i, c)| c.id != i) {
        bail!(Error::InvalidInput(format!(
            "expected {} clients with ids 0..K in order",
            cfg.client_count
        )));
    }

    for round in 0..cfg.rounds {
        let started = Instant::now();
        let selected = select_for_round(cfg.seed, cfg.client_count, cfg.fraction, round);
        let bytes_down = selected.len() * server.global.payload_bytes();

        let global = &server.global;
        let mut chosen: Vec<&mut ClientState> = clients
            .iter_mut()
            .filter(|c| selected.binary_search(&c.id).is_ok())
            .collect();
        let results: Vec<Result<ClientUpload>> = if cfg.parallel {
            chosen
                .par_iter_mut()
                .map(|c| local_update(c, global, cfg, round))
                .collect()
        } else {
            chosen
                .iter_mut()
                .map(|c| local_update(c, global, cfg, round))
                .collect()
        };
        let uploads = match results.into_iter().collect::<Result<Vec<_>>>() {
            Ok(u) => u,
            Err(e) => bail!(e),
        };
        let bytes_up = uploads.iter().map(|u| u.federated.payload_bytes()).sum();

        let next = match aggregate(&uploads) {
            Ok(w) if w.is_finite() => w,
            Ok(_) => bail!(Error::Protocol(format!(
                "aggregated global model is non-finite at round {round}"
            ))),
            Err(e) => bail!(e),
        };
        server.global = next;
        server.round = round + 1;

        let eval = if plan.every > 0 && (round + 1) % plan.every == 0 {
            match evaluation::global_round_eval(&server.global, clients) {
                Ok(e) => Some(e),
                Err(e) => bail!(e),
            }
        } else {
            None
        };
        let mean_train_loss =
            uploads.iter().map(|u| u.mean_loss).sum::<f64>() / uploads.len() as f64;
        let record = RoundRecord {
            round,
            selected,
            mean_train_loss,
            wall_time: started.elapsed(),
            eval,
            bytes_down,
            bytes_up,
        };
        debug!(
            "round {round}: loss {mean_train_loss:.4}, {} clients, {:?}",
            record.selected.len(),
            record.wall_time
        );
        observe(&RoundView {
            record: &record,
            global: &server.global,
            uploads: &uploads,
            clients,
        });
        server.history.push(record);
    }

    let sweep = if cfg.rounds > 0 {
        match evaluation::lambda_sweep(
            clients,
            &server.global,
            &plan.lambda_grid,
            plan.calibration_bins,
        ) {
            Ok(s) => Some(s),
            Err(e) => bail!(e),
        }
    } else {
        None
    };
    Ok(RunOutput { server, sweep })
}
