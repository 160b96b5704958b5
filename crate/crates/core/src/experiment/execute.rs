//! Builds the data, runs the federation and writes every output file.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use super::config::{DatasetSource, ResolvedConfig, RunConfig};
use super::persist::{self, Checkpoint};
use crate::data::{self, LabeledDataset, NoiseKind, PartitionSpec};
use crate::error::{Error, Result};
use crate::evaluation::{self, BestAverage, LambdaSweep, PlaneGrid, SweepAggregate};
use crate::federation::{self, ClientState, EvalPlan, RunOutput};
use crate::nn::{NetworkSpec, WeightVector};
use crate::rng::{stream, Purpose};

/// Environment variable naming the directory that holds run directories.
pub const OUT_ROOT_ENV: &str = "SUPERFED_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseReport {
    pub kind: NoiseKind,
    pub ratio: f64,
    /// Row-stochastic transition matrix; empty when no noise is injected.
    pub transition: Vec<Vec<f64>>,
    /// Training labels changed by the injection, over all clients.
    pub flipped: usize,
    pub train_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub examples: usize,
    pub class_count: usize,
    pub dims: usize,
    /// Examples no client received.
    pub dropped: usize,
    pub train_examples: usize,
    pub test_examples: usize,
}

/// Clients ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub clients: Vec<ClientState>,
    pub spec: NetworkSpec,
    pub data: DataSummary,
    pub noise: NoiseReport,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<LabeledDataset> {
    match &cfg.dataset {
        DatasetSource::Blobs {
            classes,
            dims,
            per_class,
            spread,
        } => data::gen_blobs(
            *classes,
            *dims,
            *per_class,
            *spread,
            &mut stream(cfg.seed, Purpose::Synthetic, 0, 0),
        ),
        DatasetSource::Idx {
            images,
            labels,
            limit,
        } => {
            let ds = data::load_idx(images, labels)?;
            match limit {
                Some(n) if *n < ds.len() => ds.subset(&(0..*n).collect::<Vec<_>>()),
                _ => Ok(ds),
            }
        }
    }
}

/// Partitions, splits each client 80/20 (by default) and corrupts training
/// labels only.
pub fn prepare(cfg: &RunConfig) -> Result<PreparedData> {
    let ds = load_dataset(cfg)?;
    let spec = PartitionSpec {
        scheme: cfg.partition,
        client_count: cfg.clients,
    };
    spec.validate(ds.len())
        .map_err(|e| Error::config("partition", e.to_string()))?;
    let parts = data::partition(&ds, &spec, &mut stream(cfg.seed, Purpose::Partition, 0, 0))?;

    let transition = match cfg.noise.kind {
        NoiseKind::None => None,
        kind => Some(data::build_transition(kind, cfg.noise.ratio, ds.class_count())?),
    };
    let mut clients = Vec::with_capacity(cfg.clients);
    let (mut flipped, mut n_train, mut n_test) = (0, 0, 0);
    for (id, indices) in parts.clients.iter().enumerate() {
        let mut split = data::split_train_test(
            &ds,
            id,
            indices,
            cfg.test_fraction,
            &mut stream(cfg.seed, Purpose::TrainTestSplit, id as u64, 0),
        )
        .map_err(|e| Error::InvalidInput(format!("client {id}: {e}")))?;
        if let Some(t) = &transition {
            let clean = split.train.labels();
            let noisy = data::apply_noise(
                clean,
                t,
                &mut stream(cfg.seed, Purpose::LabelNoise, id as u64, 0),
            )?;
            flipped += clean.iter().zip(&noisy).filter(|(a, b)| a != b).count();
            split.train = split.train.with_labels(noisy)?;
        }
        n_train += split.train.len();
        n_test += split.test.len();
        clients.push(ClientState::new(split));
    }

    let net = cfg.network_spec(ds.dims(), ds.class_count())?;
    Ok(PreparedData {
        clients,
        spec: net,
        data: DataSummary {
            examples: ds.len(),
            class_count: ds.class_count(),
            dims: ds.dims(),
            dropped: parts.dropped.len(),
            train_examples: n_train,
            test_examples: n_test,
        },
        noise: NoiseReport {
            kind: cfg.noise.kind,
            ratio: if transition.is_some() { cfg.noise.ratio } else { 0.0 },
            transition: transition.map(|t| t.rows()).unwrap_or_default(),
            flipped,
            train_examples: n_train,
        },
    })
}

pub fn initial_global(cfg: &RunConfig, spec: &NetworkSpec) -> WeightVector {
    WeightVector::init_uniform(spec, &mut stream(cfg.seed, Purpose::GlobalInit, 0, 0))
}

pub fn eval_plan(cfg: &RunConfig) -> EvalPlan {
    EvalPlan {
        every: cfg.eval_every,
        lambda_grid: evaluation::lambda_grid(cfg.lambda_step),
        calibration_bins: cfg.calibration_bins,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reductions {
    pub fedavg: bool,
    pub fedprox: bool,
    /// λ is never sampled, i.e. `L >= R`.
    pub lambda_always_zero: bool,
    pub mu: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalMetrics {
    /// Global model on every client's test split (λ = 0).
    pub global: SweepAggregate,
    /// Local models alone (λ = 1), when every client has one on the grid.
    pub local: Option<SweepAggregate>,
    pub best_average: BestAverage,
    pub lambda_star: f64,
    /// λ used for the headline numbers: λ* for personalized runs, 0 when
    /// personalization never started.
    pub headline_lambda: f64,
    pub top1: f64,
    pub ece: f64,
    pub mce: f64,
    /// Clients without a local model, evaluated at λ = 0 only.
    pub flagged_clients: Vec<usize>,
}

impl FinalMetrics {
    pub fn from_sweep(sweep: &LambdaSweep, personalized: bool) -> Result<Self> {
        let best = evaluation::best_average(sweep)?;
        let global = *sweep
            .aggregate_at(0.0)
            .ok_or_else(|| Error::InvalidInput("λ grid lacks 0".into()))?;
        let lambda = if personalized { best.shared.lambda } else { 0.0 };
        let head = *sweep.aggregate_at(lambda).expect("λ taken from the grid");
        Ok(Self {
            global,
            local: sweep.aggregate_at(1.0).copied(),
            lambda_star: best.shared.lambda,
            best_average: best,
            headline_lambda: lambda,
            top1: head.top1_mean,
            ece: head.ece_mean,
            mce: head.mce_mean,
            flagged_clients: sweep.flagged(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config_hash: String,
    pub status: &'static str,
    pub error: Option<String>,
    pub rounds_completed: usize,
    pub input: super::config::ConfigInput,
    pub resolved: RunConfig,
    pub reductions: Reductions,
    pub data: Option<DataSummary>,
    pub noise: Option<NoiseReport>,
    #[serde(rename = "final")]
    pub final_metrics: Option<FinalMetrics>,
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub output: RunOutput,
    pub clients: Vec<ClientState>,
    pub final_metrics: Option<FinalMetrics>,
    pub plane: Option<PlaneGrid>,
    pub summary: Summary,
}

/// `out_dir` from the config, else `$SUPERFED_OUT_ROOT/<hash prefix>`, else
/// `runs/<hash prefix>`.
pub fn default_out_dir(resolved: &ResolvedConfig) -> PathBuf {
    if let Some(d) = &resolved.config.out_dir {
        return d.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(resolved.short_hash())
}

pub fn execute(resolved: &ResolvedConfig) -> Result<RunReport> {
    execute_in(resolved, &default_out_dir(resolved))
}

/// Runs to completion and writes `config.json`, `rounds.csv`,
/// `lambda_sweep.csv`, `summary.json` and, when configured, `plane.csv` and
/// `checkpoint.bin` into `out_dir`. On failure the completed rounds and a
/// failed summary are still written.
pub fn execute_in(resolved: &ResolvedConfig, out_dir: &Path) -> Result<RunReport> {
    let cfg = &resolved.config;
    let hash = resolved.hash.as_str();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    persist::write_json(&out_dir.join("config.json"), resolved)?;

    let fed = cfg.fed_config();
    let mut summary = Summary {
        config_hash: hash.to_string(),
        status: "failed",
        error: None,
        rounds_completed: 0,
        input: resolved.input.clone(),
        resolved: cfg.clone(),
        reductions: Reductions {
            fedavg: fed.is_fedavg_reduction(),
            fedprox: fed.is_fedprox_reduction(),
            lambda_always_zero: fed.personalization_start >= fed.rounds,
            mu: fed.mu,
            nu: fed.nu,
        },
        data: None,
        noise: None,
        final_metrics: None,
    };
    let fail = |summary: &mut Summary, e: Error| -> Error {
        summary.error = Some(e.to_string());
        if let Err(w) = persist::write_json(&out_dir.join("summary.json"), summary) {
            log::error!("could not write failure summary: {w}");
        }
        e
    };

    let prepared = match prepare(cfg) {
        Ok(p) => p,
        Err(e) => return Err(fail(&mut summary, e)),
    };
    summary.data = Some(prepared.data.clone());
    summary.noise = Some(prepared.noise.clone());
    info!(
        "{} clients, {} train / {} test examples, {} dropped, network {:?}",
        prepared.clients.len(),
        prepared.data.train_examples,
        prepared.data.test_examples,
        prepared.data.dropped,
        prepared.spec.layer_dims()
    );

    let mut clients = prepared.clients;
    let initial = initial_global(cfg, &prepared.spec);
    let output = match federation::run(&fed, &mut clients, initial, &eval_plan(cfg)) {
        Ok(o) => o,
        Err(failure) => {
            summary.rounds_completed = failure.partial.round;
            persist::write_rounds_csv(&out_dir.join("rounds.csv"), &failure.partial.history, hash)?;
            return Err(fail(&mut summary, failure.error));
        }
    };
    summary.rounds_completed = output.server.round;
    persist::write_rounds_csv(&out_dir.join("rounds.csv"), &output.server.history, hash)?;

    let personalized = fed.personalization_start < fed.rounds;
    let final_metrics = match &output.sweep {
        Some(sweep) => {
            persist::write_sweep_csv(&out_dir.join("lambda_sweep.csv"), sweep, hash)?;
            Some(FinalMetrics::from_sweep(sweep, personalized).map_err(|e| fail(&mut summary, e))?)
        }
        None => None,
    };

    let plane = match cfg.plane {
        Some(p) => {
            let grid = probe_plane(&output.server.global, &clients, p.resolution, p.margin, cfg.weight_decay / 2.0)
                .map_err(|e| fail(&mut summary, e))?;
            persist::write_plane_csv(&out_dir.join("plane.csv"), &grid, hash)?;
            Some(grid)
        }
        None => None,
    };

    if cfg.checkpoint {
        let mut digest = [0u8; 32];
        hex::decode_to_slice(hash, &mut digest).expect("hash is 64 hex digits");
        let ck = Checkpoint {
            config_hash: digest,
            global: output.server.global.clone(),
            locals: clients
                .iter()
                .filter_map(|c| c.local_model().map(|w| (c.id, w.clone())))
                .collect(),
        };
        persist::save_checkpoint(&out_dir.join("checkpoint.bin"), &ck)?;
    }

    summary.status = "completed";
    summary.final_metrics = final_metrics.clone();
    persist::write_json(&out_dir.join("summary.json"), &summary)?;
    if let Some(f) = &final_metrics {
        info!(
            "global top-1 {:.4}, best average top-1 {:.4} at λ* = {}, ECE {:.4}, MCE {:.4}",
            f.global.top1_mean, f.best_average.shared.top1_mean, f.lambda_star, f.ece, f.mce
        );
    }
    Ok(RunReport {
        out_dir: out_dir.to_path_buf(),
        output,
        clients,
        final_metrics,
        plane,
        summary,
    })
}

/// Plane through the global model and the local models of the two
/// lowest-id clients that have one, scored on the first of those clients'
/// test split.
pub fn probe_plane(
    global: &WeightVector,
    clients: &[ClientState],
    resolution: usize,
    margin: f64,
    l2: f64,
) -> Result<PlaneGrid> {
    let with_local: Vec<&ClientState> = clients.iter().filter(|c| c.local_model().is_some()).take(2).collect();
    let [a, b] = with_local[..] else {
        return Err(Error::InvalidInput(
            "loss plane needs two clients with local models".into(),
        ));
    };
    let anchors = [global, a.local_model().unwrap(), b.local_model().unwrap()];
    evaluation::plane_probe(anchors, &a.split.test, resolution, margin, l2)
}
