//! Non-IID client partitioners and per-client train/test splitting.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{ClientSplit, LabeledDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Sort by label, cut into `shards_per_client * K` equal shards, deal
    /// shards to clients at random.
    Pathological { shards_per_client: usize },
    /// Per-client class proportions drawn from `Dirichlet(alpha * 1)`.
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub client_count: usize,
}

impl PartitionSpec {
    pub fn validate(&self, n_examples: usize) -> Result<()> {
        if self.client_count == 0 {
            return Err(Error::InvalidInput("client count must be >= 1".into()));
        }
        match self.scheme {
            PartitionScheme::Pathological { shards_per_client } => {
                if shards_per_client == 0 {
                    return Err(Error::InvalidInput("shards_per_client must be >= 1".into()));
                }
                let shards = shards_per_client * self.client_count;
                if shards > n_examples {
                    return Err(Error::InvalidInput(format!(
                        "{shards} shards requested but the dataset has only {n_examples} examples"
                    )));
                }
            }
            PartitionScheme::Dirichlet { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::InvalidInput(format!("alpha must be > 0, got {alpha}")));
                }
                if self.client_count > n_examples {
                    return Err(Error::InvalidInput(format!(
                        "{} clients but only {n_examples} examples",
                        self.client_count
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Client index sets plus the examples no client received.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// Ascending dataset indices per client.
    pub clients: Vec<Vec<usize>>,
    /// Ascending indices left over after filling equal shards/quotas.
    pub dropped: Vec<usize>,
}

pub fn partition<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    spec: &PartitionSpec,
    rng: &mut R,
) -> Result<Partition> {
    match spec.scheme {
        PartitionScheme::Pathological { .. } => partition_pathological(ds, spec, rng),
        PartitionScheme::Dirichlet { .. } => partition_dirichlet(ds, spec, rng),
    }
}

pub fn partition_pathological<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    spec: &PartitionSpec,
    rng: &mut R,
) -> Result<Partition> {
    let PartitionScheme::Pathological { shards_per_client } = spec.scheme else {
        return Err(Error::InvalidInput("expected a pathological partition spec".into()));
    };
    spec.validate(ds.len())?;

    let mut sorted: Vec<usize> = (0..ds.len()).collect();
    sorted.sort_by_key(|&i| (ds.labels()[i], i));

    let shard_count = shards_per_client * spec.client_count;
    let shard_size = ds.len() / shard_count;
    let used = shard_size * shard_count;
    let mut dropped = sorted[used..].to_vec();
    dropped.sort_unstable();

    let mut order: Vec<usize> = (0..shard_count).collect();
    order.shuffle(rng);

    let clients = order
        .chunks(shards_per_client)
        .map(|shards| {
            let mut idx: Vec<usize> = shards
                .iter()
                .flat_map(|&s| sorted[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    if !dropped.is_empty() {
        info!(
            "pathological partition: {} remainder examples dropped ({} shards of {})",
            dropped.len(),
            shard_count,
            shard_size
        );
    }
    Ok(Partition { clients, dropped })
}

/// One draw from `Dirichlet(alpha * 1_k)`.
///
/// Built from Gamma variates in log space (`G(a) = G(a+1) * U^(1/a)`), so
/// small concentrations do not underflow to an all-zero vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha + 1.0, 1.0)
        .map_err(|e| Error::InvalidInput(format!("dirichlet alpha {alpha}: {e}")))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u = 1.0 - rng.random::<f64>(); // (0, 1]
            g.ln() + u.ln() / alpha
        })
        .collect();
    let lse = crate::nn::log_sum_exp(&logs);
    Ok(logs.iter().map(|&l| (l - lse).exp()).collect())
}

pub fn partition_dirichlet<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    spec: &PartitionSpec,
    rng: &mut R,
) -> Result<Partition> {
    let PartitionScheme::Dirichlet { alpha } = spec.scheme else {
        return Err(Error::InvalidInput("expected a dirichlet partition spec".into()));
    };
    spec.validate(ds.len())?;
    let classes = ds.class_count();

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in ds.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }

    let quota = ds.len() / spec.client_count;
    let mut clients = Vec::with_capacity(spec.client_count);
    for _ in 0..spec.client_count {
        let p = sample_dirichlet(alpha, classes, rng)?;
        let available: Vec<usize> = pools.iter().map(Vec::len).collect();
        let counts = allocate_quota(&p, &available, quota);
        let mut idx = Vec::with_capacity(quota);
        for (pool, n) in pools.iter_mut().zip(counts) {
            idx.extend(pool.drain(pool.len() - n..));
        }
        idx.sort_unstable();
        clients.push(idx);
    }
    let mut dropped: Vec<usize> = pools.into_iter().flatten().collect();
    dropped.sort_unstable();
    if !dropped.is_empty() {
        info!(
            "dirichlet partition: {} examples left unassigned (quota {quota})",
            dropped.len()
        );
    }
    Ok(Partition { clients, dropped })
}

/// Turns class proportions into `quota` per-class counts, never taking more
/// than `available[c]` from class `c`.
///
/// Counts follow largest-remainder rounding of `quota * p`. When a class runs
/// out, the shortfall is spread over the classes that still have examples,
/// in proportion to their mass (uniformly if they carry none).
fn allocate_quota(p: &[f64], available: &[usize], quota: usize) -> Vec<usize> {
    let mut counts = vec![0usize; p.len()];
    let mut remaining = quota.min(available.iter().sum());
    while remaining > 0 {
        let open: Vec<usize> = (0..p.len()).filter(|&c| counts[c] < available[c]).collect();
        let mass: f64 = open.iter().map(|&c| p[c]).sum();
        let ideal = |c: usize| {
            let w = if mass > 0.0 { p[c] / mass } else { 1.0 / open.len() as f64 };
            remaining as f64 * w
        };
        // classes whose share exceeds what is left are emptied first
        let capped: Vec<usize> = open
            .iter()
            .copied()
            .filter(|&c| ideal(c) >= (available[c] - counts[c]) as f64)
            .collect();
        if !capped.is_empty() {
            for c in capped {
                remaining -= available[c] - counts[c];
                counts[c] = available[c];
            }
            continue;
        }
        let mut frac = Vec::with_capacity(open.len());
        for &c in &open {
            let x = ideal(c);
            counts[c] += x.floor() as usize;
            frac.push((x - x.floor(), c));
        }
        let short = remaining - open.iter().map(|&c| ideal(c).floor() as usize).sum::<usize>();
        frac.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, c) in frac.iter().take(short) {
            counts[c] += 1;
        }
        break;
    }
    counts
}

/// Shuffles `indices` and returns `(train, test)`; the last
/// `ceil(fraction * n)` shuffled indices (clamped to `[1, n-1]`) are test.
pub fn split_indices<R: Rng + ?Sized>(
    indices: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "test fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = indices.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 examples to split, got {n}"
        )));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let n_test = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let test = shuffled.split_off(n - n_test);
    Ok((shuffled, test))
}

pub fn split_train_test<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    client_id: usize,
    indices: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Result<ClientSplit> {
    let (train, test) = split_indices(indices, fraction, rng)?;
    Ok(ClientSplit {
        client_id,
        train: ds.subset(&train)?,
        test: ds.subset(&test)?,
    })
}
