//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls into the crate's network, mixing or aggregation code;
//! only data plumbing (datasets, RNG streams) is shared.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use superfed::data::LabeledDataset;
use superfed::experiment::{self, PreparedData, RunConfig};
use superfed::rng::{stream, Purpose};
use superfed::{ClientState, FedConfig, NetworkSpec, WeightVector};

/// Dense layer stored as nested vectors: `w[out][in]`, `b[out]`.
#[derive(Clone, Debug)]
pub struct Layer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

/// A ReLU MLP written out longhand.
#[derive(Clone, Debug)]
pub struct OracleNet {
    pub layers: Vec<Layer>,
}

impl OracleNet {
    /// Unpacks the flat layout: per layer, the `out x in` weights row by row,
    /// then the biases.
    pub fn from_flat(dims: &[usize], flat: &[f64]) -> Self {
        let mut pos = 0;
        let mut layers = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut w = vec![vec![0.0; fan_in]; fan_out];
            for row in w.iter_mut() {
                for x in row.iter_mut() {
                    *x = flat[pos];
                    pos += 1;
                }
            }
            let b = flat[pos..pos + fan_out].to_vec();
            pos += fan_out;
            layers.push(Layer { w, b });
        }
        assert_eq!(pos, flat.len());
        Self { layers }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for row in &l.w {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z: Vec<f64> = l
                .w
                .iter()
                .zip(&l.b)
                .map(|(row, b)| b + row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>())
                .collect();
            if k < last {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            a = z;
        }
        a
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z = self.logits(x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        total / xs.len() as f64
    }

    /// Gradient of [`loss`] by backpropagation, in the flat layout.
    pub fn grad(&self, xs: &[Vec<f64>], ys: &[usize]) -> Vec<f64> {
        let mut gw: Vec<Vec<Vec<f64>>> = self
            .layers
            .iter()
            .map(|l| vec![vec![0.0; l.w[0].len()]; l.w.len()])
            .collect();
        let mut gb: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.b.len()]).collect();
        let n = xs.len() as f64;
        let last = self.layers.len() - 1;
        for (x, &y) in xs.iter().zip(ys) {
            // forward, keeping activations and pre-activations
            let mut acts = vec![x.clone()];
            let mut pres = Vec::new();
            for (k, l) in self.layers.iter().enumerate() {
                let a = acts.last().unwrap();
                let z: Vec<f64> = l
                    .w
                    .iter()
                    .zip(&l.b)
                    .map(|(row, b)| b + row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>())
                    .collect();
                pres.push(z.clone());
                if k < last {
                    acts.push(z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect());
                }
            }
            let z = &pres[last];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let mut delta: Vec<f64> = e.iter().map(|v| v / s).collect();
            delta[y] -= 1.0;
            for k in (0..self.layers.len()).rev() {
                let a = &acts[k];
                for (o, d) in delta.iter().enumerate() {
                    gb[k][o] += d / n;
                    for (i, ai) in a.iter().enumerate() {
                        gw[k][o][i] += d * ai / n;
                    }
                }
                if k > 0 {
                    let mut back = vec![0.0; a.len()];
                    for (o, d) in delta.iter().enumerate() {
                        for (i, bi) in back.iter_mut().enumerate() {
                            *bi += self.layers[k].w[o][i] * d;
                        }
                    }
                    for (i, bi) in back.iter_mut().enumerate() {
                        if pres[k - 1][i] <= 0.0 {
                            *bi = 0.0;
                        }
                    }
                    delta = back;
                }
            }
        }
        let mut out = Vec::new();
        for (w, b) in gw.iter().zip(&gb) {
            for row in w {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(b);
        }
        out
    }
}

/// Central difference gradient of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn rows(ds: &LabeledDataset) -> Vec<Vec<f64>> {
    (0..ds.len()).map(|i| ds.features().row(i).to_vec()).collect()
}

/// Blob clients built through the normal experiment pipeline.
pub fn blob_setup(overrides: serde_json::Value) -> (RunConfig, PreparedData) {
    let resolved = experiment::resolve(None, None, overrides).expect("valid test config");
    let prepared = experiment::prepare(&resolved.config).expect("data prepares");
    (resolved.config, prepared)
}

/// Plain FedAvg / FedProx written from the algorithm description: sample
/// clients, train each copy of the global model with momentum SGD on
/// shuffled mini-batches of the (proximal) cross-entropy, average by sample
/// count. Returns the flat global model after every round.
///
/// Shares only the named RNG streams with the crate so both see the same
/// client samples and batch orders.
pub fn reference_fedavg(
    cfg: &FedConfig,
    clients: &[ClientState],
    spec: &NetworkSpec,
    initial: &WeightVector,
) -> Vec<Vec<f64>> {
    let dims = spec.layer_dims().to_vec();
    let data: Vec<(Vec<Vec<f64>>, Vec<usize>)> = clients
        .iter()
        .map(|c| (rows(&c.split.train), c.split.train.labels().to_vec()))
        .collect();
    let mut global = initial.to_flat();
    let mut history = Vec::new();
    for round in 0..cfg.rounds {
        let m = ((cfg.fraction * cfg.client_count as f64 + 1e-9).floor() as usize).max(1);
        let mut sel = rand::seq::index::sample(
            &mut stream(cfg.seed, Purpose::ClientSelection, 0, round as u64),
            cfg.client_count,
            m,
        )
        .into_vec();
        sel.sort_unstable();
        let lr = cfg.eta0 * 0.99f64.powi(round as i32);

        let mut updated: Vec<(Vec<f64>, usize)> = Vec::new();
        for &id in &sel {
            let (xs, ys) = &data[id];
            let mut w = global.clone();
            let mut v = vec![0.0; w.len()];
            let mut order: Vec<usize> = (0..xs.len()).collect();
            let mut rng = stream(cfg.seed, Purpose::Shuffle, id as u64, round as u64);
            for _ in 0..cfg.local_epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
                    let by: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
                    let g = OracleNet::from_flat(&dims, &w).grad(&bx, &by);
                    for j in 0..w.len() {
                        let prox = 2.0 * cfg.mu * (w[j] - global[j]);
                        v[j] = cfg.momentum * v[j] + (g[j] + prox + cfg.weight_decay * w[j]);
                        w[j] -= lr * v[j];
                    }
                }
            }
            updated.push((w, xs.len()));
        }
        let total: usize = updated.iter().map(|(_, n)| n).sum();
        let mut next = vec![0.0; global.len()];
        for (w, n) in &updated {
            let a = *n as f64 / total as f64;
            for (x, wi) in next.iter_mut().zip(w) {
                *x += a * wi;
            }
        }
        global = next;
        history.push(global.clone());
    }
    history
}
