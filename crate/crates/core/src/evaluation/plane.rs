//! Loss surface over the plane through three models.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, WeightVector};

const DEGENERATE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlaneNode {
    pub x: f64,
    pub y: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct PlaneGrid {
    pub anchors: [WeightVector; 3],
    /// Unit vector along `a2 - a1`.
    pub u: WeightVector,
    /// Unit vector along the part of `a3 - a1` orthogonal to `u`.
    pub v: WeightVector,
    pub resolution: usize,
    /// In-plane coordinates of the anchors; `a1` sits at the origin.
    pub anchor_coords: [(f64, f64); 3],
    pub l2: f64,
    /// Row-major over y then x, `resolution * resolution` entries.
    pub nodes: Vec<PlaneNode>,
}

impl PlaneGrid {
    /// `a1 + x u + y v`.
    pub fn weights_at(&self, x: f64, y: f64) -> WeightVector {
        plane_point(&self.anchors[0], &self.u, &self.v, x, y)
    }

    /// Regularized loss at an arbitrary plane point.
    pub fn loss_at(&self, x: f64, y: f64, eval: &LabeledDataset) -> Result<f64> {
        regularized_loss(&self.weights_at(x, y), eval, self.l2)
    }
}

fn plane_point(a1: &WeightVector, u: &WeightVector, v: &WeightVector, x: f64, y: f64) -> WeightVector {
    let mut w = a1.clone();
    w.add_scaled(x, u);
    w.add_scaled(y, v);
    w
}

/// Cross-entropy on `eval` plus `l2 * ‖w‖²`.
pub fn regularized_loss(w: &WeightVector, eval: &LabeledDataset, l2: f64) -> Result<f64> {
    let logits = nn::predict(w, eval.features())?;
    Ok(nn::cross_entropy(&logits, eval.labels())? + l2 * w.norm_sq())
}

/// Evaluates the loss on a `resolution x resolution` grid covering the
/// anchor triangle, widened on each side by `margin` times its extent.
pub fn plane_probe(
    anchors: [&WeightVector; 3],
    eval: &LabeledDataset,
    resolution: usize,
    margin: f64,
    l2: f64,
) -> Result<PlaneGrid> {
    let [a1, a2, a3] = anchors;
    a1.check_shape(a2, "plane anchor 2")?;
    a1.check_shape(a3, "plane anchor 3")?;
    if resolution < 2 {
        return Err(Error::InvalidInput(format!("plane resolution must be >= 2, got {resolution}")));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::InvalidInput(format!("plane margin must be >= 0, got {margin}")));
    }

    let d2 = a2.sub(a1);
    let n2 = d2.norm();
    if n2 <= DEGENERATE_TOL {
        return Err(Error::InvalidInput("plane anchors 1 and 2 coincide".into()));
    }
    let u = d2.scaled(1.0 / n2);
    let d3 = a3.sub(a1);
    let x3 = d3.dot(&u);
    let mut perp = d3.clone();
    perp.add_scaled(-x3, &u);
    let y3 = perp.norm();
    if y3 <= DEGENERATE_TOL * d3.norm().max(1.0) {
        return Err(Error::InvalidInput(
            "degenerate plane: third anchor lies on the line through the first two".into(),
        ));
    }
    let v = perp.scaled(1.0 / y3);

    let coords = [(0.0, 0.0), (n2, 0.0), (x3, y3)];
    let span = |sel: fn(&(f64, f64)) -> f64| {
        let lo = coords.iter().map(sel).fold(f64::INFINITY, f64::min);
        let hi = coords.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
        let pad = margin * (hi - lo);
        (lo - pad, hi + pad)
    };
    let (x_lo, x_hi) = span(|c| c.0);
    let (y_lo, y_hi) = span(|c| c.1);
    let steps = (resolution - 1) as f64;
    let axis = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / steps;

    let nodes = (0..resolution * resolution)
        .into_par_iter()
        .map(|k| {
            let (x, y) = (axis(x_lo, x_hi, k % resolution), axis(y_lo, y_hi, k / resolution));
            let loss = regularized_loss(&plane_point(a1, &u, &v, x, y), eval, l2)?;
            Ok(PlaneNode { x, y, loss })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PlaneGrid {
        anchors: [a1.clone(), a2.clone(), a3.clone()],
        u,
        v,
        resolution,
        anchor_coords: coords,
        l2,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Matrix, NetworkSpec};

    fn toy() -> (NetworkSpec, LabeledDataset) {
        let spec = NetworkSpec::new(vec![2, 3, 2]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, -0.5]]).unwrap();
        (spec, LabeledDataset::new(x, vec![0, 1, 1], 2).unwrap())
    }

    #[test]
    fn basis_is_orthonormal() {
        let (spec, ds) = toy();
        let n = spec.param_count();
        let a = WeightVector::from_flat(&spec, &vec![0.1; n]).unwrap();
        let b = WeightVector::from_flat(&spec, &(0..n).map(|i| i as f64 * 0.01).collect::<Vec<_>>()).unwrap();
        let c = WeightVector::from_flat(&spec, &(0..n).map(|i| ((i * 7) % 5) as f64 * 0.1).collect::<Vec<_>>()).unwrap();
        let g = plane_probe([&a, &b, &c], &ds, 3, 0.1, 0.0).unwrap();
        assert!((g.u.norm() - 1.0).abs() < 1e-10);
        assert!((g.v.norm() - 1.0).abs() < 1e-10);
        assert!(g.u.dot(&g.v).abs() < 1e-10);
        assert_eq!(g.nodes.len(), 9);
    }

    #[test]
    fn collinear_anchors_rejected() {
        let (spec, ds) = toy();
        let n = spec.param_count();
        let a = WeightVector::zeros(&spec);
        let b = WeightVector::from_flat(&spec, &vec![1.0; n]).unwrap();
        let c = b.scaled(2.0);
        assert!(plane_probe([&a, &b, &c], &ds, 3, 0.0, 0.0).is_err());
        assert!(plane_probe([&a, &a, &b], &ds, 3, 0.0, 0.0).is_err());
    }
}
