//! Feed-forward rectifier networks with exact reverse-mode gradients.
//!
//! Parameter layout: a [`WeightVector`] is an ordered list of dense blocks,
//! one per layer. Block `i` maps `layer_dims[i]` inputs to `layer_dims[i+1]`
//! outputs and stores its weight matrix row-major with shape `(out, in)`,
//! followed by its bias vector. The flattened view walks the blocks in
//! order and, within a block, emits the weight matrix row by row and then
//! the bias. Checkpoints, penalties and finite-difference oracles all use
//! this order.
//!
//! Hidden layers use the rectifier; the output layer emits raw logits and
//! the softmax lives inside [`loss_and_grad`].

use rand::Rng;

use crate::error::{Error, Result};

/// Per-round multiplicative learning-rate decay (1% per round).
pub const LR_DECAY: f64 = 0.99;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetworkSpec {
    layer_dims: Vec<usize>,
}

impl NetworkSpec {
    /// `layer_dims` is `[input, hidden..., classes]`.
    ///
    /// Zero hidden layers (a multinomial logistic model) is accepted; it is
    /// the linear reference model used by several oracles.
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "network needs at least an input and an output dim, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "all layer dims must be >= 1, got {layer_dims:?}"
            )));
        }
        Ok(Self { layer_dims })
    }

    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(classes);
        Self::new(dims)
    }

    /// Desk-scale default: `input -> 64 -> 64 -> classes`.
    pub fn two_nn_small(input: usize, classes: usize) -> Result<Self> {
        Self::mlp(input, &[64, 64], classes)
    }

    /// Two 200-unit hidden layers.
    pub fn two_nn(input: usize, classes: usize) -> Result<Self> {
        Self::mlp(input, &[200, 200], classes)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    /// Number of dense blocks (weight matrix + bias pairs).
    pub fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("matrix row", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// One layer's parameters: `weight` is `(rows = out, cols = in)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseBlock {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weight entries then bias entries.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    blocks: Vec<DenseBlock>,
}

impl WeightVector {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let blocks = spec
            .layer_dims()
            .windows(2)
            .map(|w| DenseBlock::zeros(w[1], w[0]))
            .collect();
        Self { blocks }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init_uniform<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut w = Self::zeros(spec);
        for block in &mut w.blocks {
            let limit = 1.0 / (block.cols as f64).sqrt();
            for x in &mut block.weight {
                *x = rng.random_range(-limit..=limit);
            }
        }
        w
    }

    /// Rebuilds a vector from its flattened representation.
    pub fn from_flat(spec: &NetworkSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::shape("from_flat", spec.param_count(), flat.len()));
        }
        let mut w = Self::zeros(spec);
        for (dst, &src) in w.iter_mut().zip(flat) {
            *dst = src;
        }
        Ok(w)
    }

    pub fn blocks(&self) -> &[DenseBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [DenseBlock] {
        &mut self.blocks
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    /// Layer dims implied by the block shapes.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.blocks.len() + 1);
        if let Some(first) = self.blocks.first() {
            dims.push(first.cols);
        }
        dims.extend(self.blocks.iter().map(|b| b.rows));
        dims
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            layer_dims: self.layer_dims(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(DenseBlock::len).sum()
    }

    pub fn same_shape(&self, other: &WeightVector) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    pub fn check_shape(&self, other: &WeightVector, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(context, self.layer_dims(), other.layer_dims()))
        }
    }

    pub fn matches_spec(&self, spec: &NetworkSpec) -> bool {
        self.layer_dims() == spec.layer_dims()
    }

    /// Flattened iteration in the documented order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.blocks.iter().flat_map(DenseBlock::iter)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks.iter_mut().flat_map(DenseBlock::iter_mut)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &WeightVector) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.iter_mut().for_each(|x| *x *= c);
    }

    pub fn scaled(&self, c: f64) -> WeightVector {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &WeightVector) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &WeightVector) -> WeightVector {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    /// Size of the flattened vector in bytes as exchanged between client
    /// and server (raw doubles).
    pub fn payload_bytes(&self) -> usize {
        self.param_count() * std::mem::size_of::<f64>()
    }
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    /// Pre-activation of every layer; the last one is the logits.
    pre: Vec<Matrix>,
    /// Rectified output of every hidden layer.
    hidden: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.pre.last().expect("at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

fn affine(block: &DenseBlock, input: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(input.rows(), block.rows);
    for i in 0..input.rows() {
        let x = input.row(i);
        let z = out.row_mut(i);
        for (o, zo) in z.iter_mut().enumerate() {
            let w = &block.weight[o * block.cols..(o + 1) * block.cols];
            *zo = block.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

fn relu(m: &Matrix) -> Matrix {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&z| z.max(0.0)).collect(),
    }
}

fn check_input(w: &WeightVector, batch: &Matrix) -> Result<()> {
    let input_dim = w.blocks.first().map_or(0, |b| b.cols);
    if batch.cols() != input_dim {
        return Err(Error::shape("forward input columns", input_dim, batch.cols()));
    }
    Ok(())
}

/// Logits for a batch, keeping everything the backward pass needs.
pub fn forward(w: &WeightVector, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    check_input(w, batch)?;
    let n_layers = w.blocks.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut hidden = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut current = batch.clone();
    for (i, block) in w.blocks.iter().enumerate() {
        let z = affine(block, &current);
        if i + 1 < n_layers {
            let a = relu(&z);
            hidden.push(a.clone());
            current = a;
        }
        pre.push(z);
    }
    let trace = ForwardTrace {
        input: batch.clone(),
        pre,
        hidden,
    };
    Ok((trace.logits().clone(), trace))
}

/// Logits only; no trace is kept.
pub fn predict(w: &WeightVector, batch: &Matrix) -> Result<Matrix> {
    check_input(w, batch)?;
    let n_layers = w.blocks.len();
    let mut current = batch.clone();
    for (i, block) in w.blocks.iter().enumerate() {
        let z = affine(block, &current);
        current = if i + 1 < n_layers { relu(&z) } else { z };
    }
    Ok(current)
}

/// Numerically stable `log(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|&z| (z - lse).exp()).collect()
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("labels", rows, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of logits against labels.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            log_sum_exp(row) - row[y]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean cross-entropy over the batch and its gradient with respect to `w`.
///
/// `w` must be the parameters the trace was produced with.
pub fn loss_and_grad(
    w: &WeightVector,
    trace: ForwardTrace,
    labels: &[usize],
) -> Result<(f64, WeightVector)> {
    let n = trace.batch_size();
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let logits = trace.logits();
    check_labels(labels, logits.rows(), logits.cols())?;
    if trace.pre.len() != w.blocks.len() {
        return Err(Error::shape("trace layers", w.blocks.len(), trace.pre.len()));
    }

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    // dL/dz for the current layer, starting with the logits.
    let mut delta = Matrix::zeros(n, logits.cols());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[y];
        let d = delta.row_mut(i);
        for (c, dc) in d.iter_mut().enumerate() {
            *dc = (row[c] - lse).exp() * inv_n;
        }
        d[y] -= inv_n;
    }
    loss *= inv_n;

    let mut grad = WeightVector::zeros(&w.spec());
    for layer in (0..w.blocks.len()).rev() {
        let block = &w.blocks[layer];
        let input = if layer == 0 {
            &trace.input
        } else {
            &trace.hidden[layer - 1]
        };
        let g = &mut grad.blocks[layer];
        for i in 0..n {
            let x = input.row(i);
            let d = delta.row(i);
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                g.bias[o] += dv;
                let gw = &mut g.weight[o * block.cols..(o + 1) * block.cols];
                for (gwj, &xj) in gw.iter_mut().zip(x) {
                    *gwj += dv * xj;
                }
            }
        }
        if layer > 0 {
            let prev_pre = &trace.pre[layer - 1];
            let mut next = Matrix::zeros(n, block.cols);
            for i in 0..n {
                let d = delta.row(i);
                let out = next.row_mut(i);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let wrow = &block.weight[o * block.cols..(o + 1) * block.cols];
                    for (oj, &wj) in out.iter_mut().zip(wrow) {
                        *oj += dv * wj;
                    }
                }
                // rectifier derivative, taken as 0 at the kink
                for (oj, &z) in out.iter_mut().zip(prev_pre.row(i)) {
                    if z <= 0.0 {
                        *oj = 0.0;
                    }
                }
            }
            delta = next;
        }
    }
    Ok((loss, grad))
}

/// Momentum buffer plus the constants of the update rule.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub velocity: WeightVector,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    /// Zero velocity shaped like `like`.
    pub fn new(like: &WeightVector, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: WeightVector::zeros(&like.spec()),
            momentum,
            weight_decay,
        }
    }

    pub fn with_defaults(like: &WeightVector) -> Self {
        Self::new(like, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY)
    }
}

/// One SGD step with heavy-ball momentum and coupled weight decay:
///
/// ```text
/// v <- momentum * v + (grad + weight_decay * w)
/// w <- w - lr * v
/// ```
pub fn sgd_step(
    w: &mut WeightVector,
    grad: &WeightVector,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    w.check_shape(grad, "sgd_step gradient")?;
    w.check_shape(&state.velocity, "sgd_step velocity")?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidInput(format!("learning rate must be > 0, got {lr}")));
    }
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let (m, wd) = (state.momentum, state.weight_decay);
    for ((wi, &gi), vi) in w.iter_mut().zip(grad.iter()).zip(state.velocity.iter_mut()) {
        *vi = m * *vi + (gi + wd * *wi);
        *wi -= lr * *vi;
    }
    Ok(())
}

/// `eta0 * 0.99^round`.
pub fn lr_at_round(eta0: f64, round: usize) -> f64 {
    eta0 * LR_DECAY.powi(round as i32)
}
