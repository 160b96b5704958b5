//! Run configuration: defaults, presets, JSON files and flag overrides.
//!
//! Layers are merged as JSON documents in the order
//! defaults ← preset ← config file ← flags, and the result is deserialized
//! once with unknown keys rejected. Errors name the offending field path.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::data::{NoiseKind, PartitionScheme};
use crate::error::{Error, Result};
use crate::federation::{FedConfig, LocalInit};
use crate::mixing::{MixScheme, PenaltyMode};
use crate::nn::NetworkSpec;

/// Personalization starts at this fraction of the rounds unless set.
pub const DEFAULT_PERSONALIZATION_FRACTION: f64 = 0.4;

/// Where the examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Gaussian blobs, see [`crate::data::gen_blobs`].
    Blobs {
        classes: usize,
        dims: usize,
        per_class: usize,
        spread: f64,
    },
    /// An IDX image/label file pair such as MNIST.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` examples.
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::None,
            ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    /// Grid nodes per axis.
    pub resolution: usize,
    /// Padding around the anchor triangle, as a fraction of its extent.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub rounds: usize,
    /// Overrides `personalization_fraction` when present.
    pub personalization_start: Option<usize>,
    pub personalization_fraction: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub clients: usize,
    pub fraction: f64,
    pub lr: f64,
    pub mu: f64,
    pub nu: f64,
    pub scheme: MixScheme,
    pub seed: u64,
    pub local_init: LocalInit,
    pub momentum: f64,
    pub weight_decay: f64,
    pub penalty_mode: PenaltyMode,
    pub parallel: bool,
    pub dataset: DatasetSource,
    pub partition: PartitionScheme,
    pub noise: NoiseSpec,
    /// Hidden layer widths of the ReLU MLP.
    pub hidden: Vec<usize>,
    pub test_fraction: f64,
    /// Evaluate the global model every this many rounds; 0 disables.
    pub eval_every: usize,
    pub lambda_step: f64,
    pub calibration_bins: usize,
    pub plane: Option<PlaneSpec>,
    /// Write a binary checkpoint of the final models.
    pub checkpoint: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fed = FedConfig::default();
        Self {
            rounds: fed.rounds,
            personalization_start: None,
            personalization_fraction: DEFAULT_PERSONALIZATION_FRACTION,
            batch_size: fed.batch_size,
            local_epochs: fed.local_epochs,
            clients: fed.client_count,
            fraction: fed.fraction,
            lr: fed.eta0,
            mu: fed.mu,
            nu: fed.nu,
            scheme: fed.scheme,
            seed: fed.seed,
            local_init: fed.local_init,
            momentum: fed.momentum,
            weight_decay: fed.weight_decay,
            penalty_mode: fed.penalty_mode,
            parallel: fed.parallel,
            dataset: DatasetSource::Blobs {
                classes: 10,
                dims: 20,
                per_class: 500,
                spread: 1.0,
            },
            partition: PartitionScheme::Pathological {
                shards_per_client: 2,
            },
            noise: NoiseSpec::default(),
            hidden: vec![64, 64],
            test_fraction: 0.2,
            eval_every: 10,
            lambda_step: 0.1,
            calibration_bins: 10,
            plane: None,
            checkpoint: true,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// `L`, explicit or `floor(personalization_fraction * R)`.
    pub fn personalization_start(&self) -> usize {
        self.personalization_start
            .unwrap_or((self.personalization_fraction * self.rounds as f64 + 1e-9).floor() as usize)
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            rounds: self.rounds,
            personalization_start: self.personalization_start(),
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            client_count: self.clients,
            fraction: self.fraction,
            eta0: self.lr,
            mu: self.mu,
            nu: self.nu,
            scheme: self.scheme,
            seed: self.seed,
            local_init: self.local_init,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            penalty_mode: self.penalty_mode,
            parallel: self.parallel,
        }
    }

    pub fn network_spec(&self, input: usize, classes: usize) -> Result<NetworkSpec> {
        NetworkSpec::mlp(input, &self.hidden, classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(field, msg));
        if !(0.0..=1.0).contains(&self.personalization_fraction) {
            return bad(
                "personalization_fraction",
                format!("must be in [0, 1], got {}", self.personalization_fraction),
            );
        }
        self.fed_config().validate()?;
        match &self.dataset {
            DatasetSource::Blobs {
                classes,
                dims,
                per_class,
                spread,
            } => {
                if *classes < 2 {
                    return bad("dataset.classes", format!("need at least 2 classes, got {classes}"));
                }
                if *dims == 0 || *per_class == 0 {
                    return bad("dataset", "dims and per_class must be >= 1".into());
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return bad("dataset.spread", format!("must be >= 0, got {spread}"));
                }
            }
            DatasetSource::Idx { limit, .. } => {
                if *limit == Some(0) {
                    return bad("dataset.limit", "must be >= 1".into());
                }
            }
        }
        match self.partition {
            PartitionScheme::Pathological { shards_per_client: 0 } => {
                return bad("partition.shards_per_client", "must be >= 1".into());
            }
            PartitionScheme::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                return bad("partition.alpha", format!("must be > 0, got {alpha}"));
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.noise.ratio) {
            return bad("noise.ratio", format!("must be in [0, 1), got {}", self.noise.ratio));
        }
        if self.hidden.is_empty() {
            return bad("hidden", "need at least one hidden layer".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be >= 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction", format!("must be in (0, 1), got {}", self.test_fraction));
        }
        if !(self.lambda_step > 0.0 && self.lambda_step <= 1.0) {
            return bad("lambda_step", format!("must be in (0, 1], got {}", self.lambda_step));
        }
        if self.calibration_bins == 0 {
            return bad("calibration_bins", "must be >= 1".into());
        }
        if let Some(p) = self.plane {
            if p.resolution < 2 {
                return bad("plane.resolution", format!("must be >= 2, got {}", p.resolution));
            }
            if !(p.margin >= 0.0 && p.margin.is_finite()) {
                return bad("plane.margin", format!("must be >= 0, got {}", p.margin));
            }
        }
        Ok(())
    }
}

/// Named overlays applied on top of the defaults.
pub fn preset(name: &str) -> Option<Value> {
    let v = match name {
        "mnist-label-noise" => json!({
            "rounds": 500,
            "local_epochs": 10,
            "batch_size": 10,
            "clients": 100,
            "fraction": 0.05,
            "lr": 0.01,
            "hidden": [200, 200],
            "dataset": {
                "kind": "idx",
                "images": "data/mnist/train-images-idx3-ubyte",
                "labels": "data/mnist/train-labels-idx1-ubyte"
            },
            "partition": { "kind": "dirichlet", "alpha": 10.0 },
            "noise": { "kind": "pair", "ratio": 0.1 }
        }),
        "fedavg-reduction" => json!({
            "mu": 0.0,
            "nu": 0.0,
            "personalization_start": null,
            "personalization_fraction": 1.0
        }),
        "fedprox-reduction" => json!({
            "mu": 0.01,
            "nu": 0.0,
            "personalization_start": null,
            "personalization_fraction": 1.0
        }),
        "noise-symmetric-0.6" => json!({
            "noise": { "kind": "symmetric", "ratio": 0.6 }
        }),
        _ => return None,
    };
    Some(v)
}

pub const PRESETS: &[&str] = &[
    "mnist-label-noise",
    "fedavg-reduction",
    "fedprox-reduction",
    "noise-symmetric-0.6",
];

/// The layers a config was built from, kept verbatim for provenance.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConfigInput {
    pub preset: Option<String>,
    pub file: Option<Value>,
    pub overrides: Value,
}

/// A validated config together with its provenance and hash.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub input: ConfigInput,
    pub config: RunConfig,
    /// Hex SHA-256 of the canonical JSON of `config`.
    pub hash: String,
}

impl ResolvedConfig {
    pub fn short_hash(&self) -> &str {
        &self.hash[..12]
    }
}

/// Merges `overlay` into `base`. Objects merge key by key, except that an
/// object whose `kind` differs from the base's replaces it wholesale.
fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            let kind_changed = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changed {
                *b = o.clone();
                return;
            }
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Resolves the layered config.
///
/// `file` may carry a top-level `"preset"` key; a preset passed explicitly
/// takes precedence over it.
pub fn resolve(preset_name: Option<&str>, file: Option<Value>, overrides: Value) -> Result<ResolvedConfig> {
    let mut file = file;
    let mut chosen = preset_name.map(str::to_owned);
    if let Some(Value::Object(map)) = file.as_mut() {
        if let Some(p) = map.remove("preset") {
            let Value::String(p) = p else {
                return Err(Error::config("preset", "must be a string"));
            };
            chosen.get_or_insert(p);
        }
    }
    if let Some(f) = &file {
        if !f.is_object() {
            return Err(Error::config("<root>", "config file must hold a JSON object"));
        }
    }
    if !(overrides.is_object() || overrides.is_null()) {
        return Err(Error::config("<overrides>", "overrides must be a JSON object"));
    }

    let mut doc = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    if let Some(name) = &chosen {
        let layer = preset(name).ok_or_else(|| {
            Error::config("preset", format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")))
        })?;
        merge(&mut doc, &layer);
    }
    if let Some(f) = &file {
        merge(&mut doc, f);
    }
    if overrides.is_object() {
        merge(&mut doc, &overrides);
    }

    let mut config: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    config.validate()?;
    // record the effective L so the resolved config is self-describing
    config.personalization_start = Some(config.personalization_start());

    let hash = config_hash(&config);
    Ok(ResolvedConfig {
        input: ConfigInput {
            preset: chosen,
            file,
            overrides: if overrides.is_null() {
                Value::Object(Map::new())
            } else {
                overrides
            },
        },
        config,
        hash,
    })
}

/// Parses a JSON config document.
pub fn parse_config_str(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::config("<root>", format!("invalid JSON: {e}")))
}

/// Canonical hash; `out_dir` and `parallel` do not change results and are
/// excluded.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut canonical = cfg.clone();
    canonical.out_dir = None;
    canonical.parallel = true;
    let bytes = serde_json::to_vec(&canonical).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// `pathological`, `pathological:<shards>` or `dirichlet:<alpha>`.
pub fn parse_partition_flag(s: &str) -> Result<Value> {
    let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
    let num = |a: &str| {
        a.parse::<f64>()
            .map_err(|_| Error::config("partition", format!("cannot parse `{a}` as a number")))
    };
    match (kind, arg) {
        ("pathological", None) => Ok(json!({ "kind": "pathological", "shards_per_client": 2 })),
        ("pathological", Some(a)) => {
            let n: usize = a
                .parse()
                .map_err(|_| Error::config("partition", format!("cannot parse `{a}` as a shard count")))?;
            Ok(json!({ "kind": "pathological", "shards_per_client": n }))
        }
        ("dirichlet", Some(a)) => Ok(json!({ "kind": "dirichlet", "alpha": num(a)? })),
        _ => Err(Error::config(
            "partition",
            format!("expected `pathological[:shards]` or `dirichlet:<alpha>`, got `{s}`"),
        )),
    }
}

/// `none`, `pair:<ε>` or `symmetric:<ε>`.
pub fn parse_noise_flag(s: &str) -> Result<Value> {
    let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
    let ratio = |a: &str| {
        a.parse::<f64>()
            .map_err(|_| Error::config("noise", format!("cannot parse `{a}` as a noise ratio")))
    };
    match (kind, arg) {
        ("none", None) => Ok(json!({ "kind": "none", "ratio": 0.0 })),
        ("pair" | "symmetric", Some(a)) => Ok(json!({ "kind": kind, "ratio": ratio(a)? })),
        _ => Err(Error::config(
            "noise",
            format!("expected `none`, `pair:<ratio>` or `symmetric:<ratio>`, got `{s}`"),
        )),
    }
}
