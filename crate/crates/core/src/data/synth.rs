use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Isotropic Gaussian blobs.
///
/// Each class gets a center drawn uniformly from `[-1, 1]^dims`; its
/// `per_class` examples are `center + spread * N(0, I)`. Examples are
/// emitted class by class.
pub fn gen_blobs<R: Rng + ?Sized>(
    class_count: usize,
    dims: usize,
    per_class: usize,
    spread: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if class_count == 0 || dims == 0 || per_class == 0 {
        return Err(Error::InvalidInput(format!(
            "blob counts must be >= 1 (classes={class_count}, dims={dims}, per_class={per_class})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidInput(format!("spread must be >= 0, got {spread}")));
    }
    let centers: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..dims).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in center {
                let z: f64 = StandardNormal.sample(rng);
                data.push(mu + spread * z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Matrix::from_vec(n, dims, data)?, labels, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn zero_spread_collapses_to_centers() {
        let mut rng = stream(1, Purpose::Synthetic, 0, 0);
        let ds = gen_blobs(3, 4, 5, 0.0, &mut rng).unwrap();
        for c in 0..3 {
            let first = ds.features().row(c * 5).to_vec();
            for i in 0..5 {
                assert_eq!(ds.features().row(c * 5 + i), first.as_slice());
            }
        }
    }

    #[test]
    fn deterministic_given_stream() {
        let a = gen_blobs(4, 3, 10, 0.5, &mut stream(9, Purpose::Synthetic, 0, 0)).unwrap();
        let b = gen_blobs(4, 3, 10, 0.5, &mut stream(9, Purpose::Synthetic, 0, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_histogram(), vec![10; 4]);
    }

    #[test]
    fn rejects_zero_counts() {
        let mut rng = stream(0, Purpose::Synthetic, 0, 0);
        assert!(gen_blobs(0, 2, 2, 0.1, &mut rng).is_err());
        assert!(gen_blobs(2, 2, 0, 0.1, &mut rng).is_err());
    }
}
