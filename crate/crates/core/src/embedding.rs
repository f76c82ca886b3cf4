//! Embedding vectors and the inner-product kernel every score is built on.
//!
//! Values are stored as `f32`; all accumulation happens in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|‖v‖ − 1|` for a vector to count as unit length.
pub const UNIT_TOLERANCE: f64 = 1e-4;

/// Below this deviation from unit norm, normalization leaves the vector untouched.
///
/// Keeps `l2_normalize` exactly idempotent, so stored payloads survive
/// load/normalize/save cycles bit for bit.
const RENORM_EPSILON: f64 = 1e-6;

/// A finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyEmbedding);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { values })
    }

    /// Builds an embedding and L2-normalizes it.
    pub fn unit(values: Vec<f32>) -> Result<Self> {
        l2_normalize(&Self::new(values)?)
    }

    /// An all-zero vector. Valid as a "no signal" input to fusion scoring.
    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn ensure_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(Error::DimMismatch {
                expected,
                got: self.dim(),
            })
        }
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

/// Returns `v / ‖v‖`.
pub fn l2_normalize(v: &Embedding) -> Result<Embedding> {
    let n = v.norm();
    if !n.is_finite() {
        return Err(Error::NonFinite);
    }
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    if (n - 1.0).abs() <= RENORM_EPSILON {
        return Ok(v.clone());
    }
    let values = v.values.iter().map(|&x| (x as f64 / n) as f32).collect();
    Ok(Embedding { values })
}

/// Inner product of two embeddings of equal dimension.
pub fn dot(u: &Embedding, v: &Embedding) -> Result<f64> {
    v.ensure_dim(u.dim())?;
    Ok(dot_slices(u.as_slice(), v.as_slice()))
}

/// Unchecked inner product with `f64` accumulation. Callers guarantee equal lengths.
#[inline]
pub fn dot_slices(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // `+ 0.0` folds a negative-zero sum into positive zero.
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>()
        + 0.0
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot_slices(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&e(&[3.0, 4.0])).unwrap();
        assert!((n.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((n.as_slice()[1] - 0.8).abs() < 1e-7);
        assert_eq!(l2_normalize(&e(&[1.0, 0.0])).unwrap(), e(&[1.0, 0.0]));
        assert!(matches!(
            l2_normalize(&e(&[0.0, 0.0])),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(
            Embedding::new(vec![1.0, f32::NAN]),
            Err(Error::NonFinite)
        ));
        assert!(matches!(
            Embedding::new(vec![f32::INFINITY]),
            Err(Error::NonFinite)
        ));
        assert!(matches!(Embedding::new(vec![]), Err(Error::EmptyEmbedding)));
    }

    #[test]
    fn huge_values_still_normalize() {
        let v = e(&[f32::MAX, f32::MAX]);
        // f64 accumulation keeps this finite, so it normalizes.
        assert!(l2_normalize(&v).unwrap().is_unit());
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&e(&[1.0, 0.0]), &e(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(dot(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        let d = dot(&e(&[0.8, 0.6]), &e(&[1.0, 0.0])).unwrap();
        assert!((d - 0.8).abs() < 1e-6);
        assert!(matches!(
            dot(&e(&[1.0, 0.0]), &e(&[1.0, 0.0, 0.0])),
            Err(Error::DimMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn unit_dot_bounded_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let dim = rng.random_range(1..32);
            let mut draw = || {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                Embedding::unit(v)
            };
            let (Ok(u), Ok(v)) = (draw(), draw()) else {
                continue;
            };
            let d = dot(&u, &v).unwrap();
            assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&d), "{d}");
        }
    }

    fn finite_vec() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-100.0f32..100.0, 1..24)
    }

    proptest! {
        #[test]
        fn normalize_is_unit_and_idempotent(v in finite_vec()) {
            let v = e(&v);
            prop_assume!(v.norm() > 1e-3);
            let once = l2_normalize(&v).unwrap();
            prop_assert!((once.norm() - 1.0).abs() <= 1e-6);
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() as f64 <= 1e-6);
            }
            // direction preserved
            prop_assert!(dot(&once, &v).unwrap() > 0.0);
        }

        #[test]
        fn dot_is_symmetric((u, v) in (1usize..24).prop_flat_map(|d| (
            prop::collection::vec(-10.0f32..10.0, d),
            prop::collection::vec(-10.0f32..10.0, d),
        ))) {
            let (u, v) = (e(&u), e(&v));
            let a = dot(&u, &v).unwrap();
            let b = dot(&v, &u).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
