//! Label corruption through a row-stochastic transition matrix
//! `T[i][j] = P(noisy = j | clean = i)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    /// Class `i` flips to `(i + 1) mod n` with probability ε.
    Pair,
    /// Class `i` flips to each other class with probability ε / (n - 1).
    Symmetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    kind: NoiseKind,
    epsilon: f64,
    class_count: usize,
    /// Row-major `class_count x class_count`.
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.class_count..(i + 1) * self.class_count]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.class_count + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.class_count).map(|i| self.row(i).to_vec()).collect()
    }
}

/// `NoiseKind::None` always yields the identity regardless of `epsilon`.
pub fn build_transition(kind: NoiseKind, epsilon: f64, class_count: usize) -> Result<TransitionMatrix> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidInput(format!(
            "noise ratio must be in [0, 1), got {epsilon}"
        )));
    }
    if class_count < 2 {
        return Err(Error::InvalidInput(format!(
            "label noise needs at least 2 classes, got {class_count}"
        )));
    }
    let n = class_count;
    let epsilon = if kind == NoiseKind::None { 0.0 } else { epsilon };
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut entries[i * n..(i + 1) * n];
        match kind {
            NoiseKind::None => row[i] = 1.0,
            NoiseKind::Pair => {
                row[i] = 1.0 - epsilon;
                row[(i + 1) % n] += epsilon;
            }
            NoiseKind::Symmetric => {
                let off = epsilon / (n - 1) as f64;
                row.iter_mut().for_each(|x| *x = off);
                row[i] = 1.0 - epsilon;
            }
        }
    }
    Ok(TransitionMatrix {
        kind,
        epsilon,
        class_count: n,
        entries,
    })
}

/// Resamples every label independently from its row of `t`.
pub fn apply_noise<R: Rng + ?Sized>(
    labels: &[usize],
    t: &TransitionMatrix,
    rng: &mut R,
) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| {
            if y >= t.class_count {
                return Err(Error::InvalidInput(format!(
                    "label {y} out of range for {} classes",
                    t.class_count
                )));
            }
            let row = t.row(y);
            let u = rng.random::<f64>();
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(j);
                }
            }
            Ok(row.iter().rposition(|&p| p > 0.0).expect("row has mass"))
        })
        .collect()
}
