//! Convex mixing of a federated and a local model, the two weight-space
//! regularizers, and assembly of the joint endpoint gradients.
//!
//! For a mixing coefficient `λ` the client trains through the mixed model
//! `W(λ) = (1 - λ) w_f + λ w_l`. One backward pass at `W(λ)` yields the task
//! gradient `g`; the endpoint gradients are then
//!
//! ```text
//! grad_f = (1 - λ) g + μ ∇_f ‖w_f - w_g‖² + ν ∇_f cos²(w_f, w_l)
//! grad_l =       λ g                     + ν ∇_l cos²(w_f, w_l)
//! ```
//!
//! applied per layer block, with `λ` shared by every block under model
//! mixing and drawn per block under layer mixing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::WeightVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixScheme {
    /// One λ for the whole network.
    #[serde(rename = "mm")]
    ModelMixing,
    /// An independent λ per layer block.
    #[serde(rename = "lm")]
    LayerMixing,
}

impl MixScheme {
    pub fn short_name(self) -> &'static str {
        match self {
            MixScheme::ModelMixing => "mm",
            MixScheme::LayerMixing => "lm",
        }
    }
}

/// Mixing coefficients for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaAssignment {
    scheme: MixScheme,
    values: Vec<f64>,
    layer_count: usize,
}

impl LambdaAssignment {
    pub fn new(scheme: MixScheme, values: Vec<f64>, layer_count: usize) -> Result<Self> {
        let expected = match scheme {
            MixScheme::ModelMixing => 1,
            MixScheme::LayerMixing => layer_count,
        };
        if values.len() != expected {
            return Err(Error::shape("lambda assignment", expected, values.len()));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("lambda {bad} outside [0, 1]")));
        }
        Ok(Self {
            scheme,
            values,
            layer_count,
        })
    }

    /// Every block mixed with the same `lambda`, expressed in `scheme`.
    pub fn constant(scheme: MixScheme, lambda: f64, layer_count: usize) -> Result<Self> {
        let n = match scheme {
            MixScheme::ModelMixing => 1,
            MixScheme::LayerMixing => layer_count,
        };
        Self::new(scheme, vec![lambda; n], layer_count)
    }

    pub fn zero(scheme: MixScheme, layer_count: usize) -> Self {
        Self::constant(scheme, 0.0, layer_count).expect("0 is a valid lambda")
    }

    pub fn scheme(&self) -> MixScheme {
        self.scheme
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    /// λ applied to layer block `block`.
    pub fn for_block(&self, block: usize) -> f64 {
        match self.scheme {
            MixScheme::ModelMixing => self.values[0],
            MixScheme::LayerMixing => self.values[block],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    fn check_against(&self, w: &WeightVector) -> Result<()> {
        if self.layer_count != w.layer_count() {
            return Err(Error::shape(
                "lambda layer count",
                w.layer_count(),
                self.layer_count,
            ));
        }
        Ok(())
    }
}

/// How the orthogonality penalty is taken over the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// cos² of the whole flattened vectors.
    #[default]
    Global,
    /// Mean over layer blocks of the per-block cos².
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// Proximal strength.
    pub mu: f64,
    /// Orthogonality strength.
    pub nu: f64,
    /// Below this norm cos² is treated as 0 with zero gradient.
    pub epsilon_norm: f64,
    pub penalty_mode: PenaltyMode,
}

impl RegularizerConfig {
    pub fn new(mu: f64, nu: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) || !(nu >= 0.0 && nu.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "mu and nu must be finite and >= 0, got mu={mu}, nu={nu}"
            )));
        }
        Ok(Self {
            mu,
            nu,
            epsilon_norm: 1e-12,
            penalty_mode: PenaltyMode::Global,
        })
    }

    pub fn with_penalty_mode(mut self, mode: PenaltyMode) -> Self {
        self.penalty_mode = mode;
        self
    }
}

/// λ for one mini-batch: all zeros before the personalization start round,
/// otherwise independent `Unif[0, 1)` draws (one, or one per layer).
pub fn sample_lambda<R: Rng + ?Sized>(
    rng: &mut R,
    scheme: MixScheme,
    round: usize,
    personalization_start: usize,
    layer_count: usize,
) -> LambdaAssignment {
    assert!(layer_count >= 1, "layer_count must be >= 1");
    if round < personalization_start {
        return LambdaAssignment::zero(scheme, layer_count);
    }
    let n = match scheme {
        MixScheme::ModelMixing => 1,
        MixScheme::LayerMixing => layer_count,
    };
    let values = (0..n).map(|_| rng.random::<f64>()).collect();
    LambdaAssignment {
        scheme,
        values,
        layer_count,
    }
}

/// `(1 - λ_b) w_f + λ_b w_l` per layer block.
pub fn mix(w_f: &WeightVector, w_l: &WeightVector, lam: &LambdaAssignment) -> Result<WeightVector> {
    w_f.check_shape(w_l, "mix")?;
    lam.check_against(w_f)?;
    let mut out = w_f.clone();
    for (b, (dst, loc)) in out.blocks_mut().iter_mut().zip(w_l.blocks()).enumerate() {
        let l = lam.for_block(b);
        let keep = 1.0 - l;
        for (x, &y) in dst.iter_mut().zip(loc.iter()) {
            *x = keep * *x + l * y;
        }
    }
    Ok(out)
}

/// `(cos, ‖f‖, ‖l‖)`, or `None` when either norm is below `eps`.
fn cosine_parts<'a>(
    f: impl Iterator<Item = &'a f64>,
    l: impl Iterator<Item = &'a f64>,
    eps: f64,
) -> Option<(f64, f64, f64)> {
    let (mut dot, mut nf2, mut nl2) = (0.0, 0.0, 0.0);
    for (a, b) in f.zip(l) {
        dot += a * b;
        nf2 += a * a;
        nl2 += b * b;
    }
    let (nf, nl) = (nf2.sqrt(), nl2.sqrt());
    if nf < eps || nl < eps {
        return None;
    }
    Some((dot / (nf * nl), nf, nl))
}

/// `cos²(w_f, w_l)` and its exact gradients with respect to both arguments.
///
/// With `c = ⟨f,l⟩ / (‖f‖‖l‖)`:
/// `∇_f c² = 2c (l / (‖f‖‖l‖) - c f / ‖f‖²)` and symmetrically for `l`.
pub fn cos_sq_penalty(
    w_f: &WeightVector,
    w_l: &WeightVector,
    cfg: &RegularizerConfig,
) -> Result<(f64, WeightVector, WeightVector)> {
    w_f.check_shape(w_l, "cos_sq_penalty")?;
    let mut grad_f = WeightVector::zeros(&w_f.spec());
    let mut grad_l = grad_f.clone();
    let eps = cfg.epsilon_norm;

    match cfg.penalty_mode {
        PenaltyMode::Global => {
            let Some((cos, nf, nl)) = cosine_parts(w_f.iter(), w_l.iter(), eps) else {
                return Ok((0.0, grad_f, grad_l));
            };
            fill_cos_grads(
                cos,
                nf,
                nl,
                1.0,
                w_f.iter().zip(w_l.iter()),
                grad_f.iter_mut().zip(grad_l.iter_mut()),
            );
            Ok((cos * cos, grad_f, grad_l))
        }
        PenaltyMode::PerLayer => {
            let weight = 1.0 / w_f.layer_count() as f64;
            let mut value = 0.0;
            for (b, (fb, lb)) in w_f.blocks().iter().zip(w_l.blocks()).enumerate() {
                let Some((cos, nf, nl)) = cosine_parts(fb.iter(), lb.iter(), eps) else {
                    continue;
                };
                value += weight * cos * cos;
                let gf = &mut grad_f.blocks_mut()[b];
                let gl = &mut grad_l.blocks_mut()[b];
                fill_cos_grads(
                    cos,
                    nf,
                    nl,
                    weight,
                    fb.iter().zip(lb.iter()),
                    gf.iter_mut().zip(gl.iter_mut()),
                );
            }
            Ok((value, grad_f, grad_l))
        }
    }
}

fn fill_cos_grads<'a, 'b>(
    cos: f64,
    nf: f64,
    nl: f64,
    weight: f64,
    params: impl Iterator<Item = (&'a f64, &'a f64)>,
    grads: impl Iterator<Item = (&'b mut f64, &'b mut f64)>,
) {
    let inv_prod = 1.0 / (nf * nl);
    let (inv_f2, inv_l2) = (1.0 / (nf * nf), 1.0 / (nl * nl));
    let k = weight * 2.0 * cos;
    for ((f, l), (gf, gl)) in params.zip(grads) {
        *gf = k * (l * inv_prod - cos * f * inv_f2);
        *gl = k * (f * inv_prod - cos * l * inv_l2);
    }
}

/// `‖w_f - w_g‖²` and its gradient `2 (w_f - w_g)`; `w_g` is a constant.
pub fn prox_penalty(w_f: &WeightVector, w_g: &WeightVector) -> Result<(f64, WeightVector)> {
    w_f.check_shape(w_g, "prox_penalty")?;
    let mut grad = w_f.sub(w_g);
    let value = grad.norm_sq();
    grad.scale(2.0);
    Ok((value, grad))
}

/// Endpoint gradients of the local objective from the task gradient taken
/// at the mixed model.
pub fn assemble_gradients(
    task_grad: &WeightVector,
    lam: &LambdaAssignment,
    w_f: &WeightVector,
    w_l: &WeightVector,
    w_g: &WeightVector,
    cfg: &RegularizerConfig,
) -> Result<(WeightVector, WeightVector)> {
    task_grad.check_shape(w_f, "assemble_gradients task gradient")?;
    w_f.check_shape(w_l, "assemble_gradients local model")?;
    w_f.check_shape(w_g, "assemble_gradients global model")?;
    lam.check_against(w_f)?;

    let mut grad_f = task_grad.clone();
    let mut grad_l = task_grad.clone();
    for (b, (gf, gl)) in grad_f
        .blocks_mut()
        .iter_mut()
        .zip(grad_l.blocks_mut().iter_mut())
        .enumerate()
    {
        let l = lam.for_block(b);
        gf.iter_mut().for_each(|x| *x *= 1.0 - l);
        gl.iter_mut().for_each(|x| *x *= l);
    }

    if cfg.mu != 0.0 {
        let (_, prox) = prox_penalty(w_f, w_g)?;
        grad_f.add_scaled(cfg.mu, &prox);
    }
    if cfg.nu != 0.0 {
        let (_, cf, cl) = cos_sq_penalty(w_f, w_l, cfg)?;
        grad_f.add_scaled(cfg.nu, &cf);
        grad_l.add_scaled(cfg.nu, &cl);
    }
    Ok((grad_f, grad_l))
}
