//! Frozen random-projection embedding of proposal features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::proposal::FEATURE_DIM;
use crate::error::{Error, Result};

/// Centroid features (x, y, z) inside the feature vector.
const POSITION: std::ops::Range<usize> = 20..23;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub dim: usize,
    pub seed: u64,
    /// Extra weight on the centroid features before projection; instances are
    /// told apart mostly by where they are.
    pub position_weight: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: 32,
            seed: 0x5eed,
            position_weight: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    dim: usize,
    weights: Vec<f64>,
    scale: Vec<f64>,
}

impl Embedder {
    pub fn new(cfg: &EmbedConfig) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(Error::InvalidInput("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let norm = 1.0 / (cfg.dim as f64).sqrt();
        let weights = (0..cfg.dim * FEATURE_DIM)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * norm
            })
            .collect();
        let mut scale = vec![1.0; FEATURE_DIM];
        for s in &mut scale[POSITION] {
            *s = cfg.position_weight;
        }
        Ok(Embedder {
            dim: cfg.dim,
            weights,
            scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Projects and L2-normalises. A zero projection maps to the first basis vector.
    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != FEATURE_DIM {
            return Err(Error::Contract(format!(
                "embedding expects {FEATURE_DIM} features, got {}",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        let mut e: Vec<f64> = self
            .weights
            .chunks_exact(FEATURE_DIM)
            .map(|row| {
                row.iter()
                    .zip(features)
                    .zip(&self.scale)
                    .map(|((w, f), s)| w * f * s)
                    .sum()
            })
            .collect();
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            log::warn!("zero embedding projection; using the canonical unit vector");
            e.iter_mut().for_each(|v| *v = 0.0);
            e[0] = 1.0;
        } else {
            e.iter_mut().for_each(|v| *v /= n);
        }
        Ok(e)
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_input_gets_canonical_vector() {
        let e = Embedder::new(&EmbedConfig::default()).unwrap();
        let v = e.embed(&[0.0; FEATURE_DIM]).unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
        assert!(e.embed(&[0.0; 3]).is_err());
    }

    #[test]
    fn same_seed_same_projection() {
        let a = Embedder::new(&EmbedConfig::default()).unwrap();
        let b = Embedder::new(&EmbedConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn unit_norm(f in proptest::collection::vec(-5.0..5.0f64, FEATURE_DIM)) {
            let e = Embedder::new(&EmbedConfig::default()).unwrap();
            let v = e.embed(&f).unwrap();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
            prop_assert_eq!(l2_distance(&v, &e.embed(&f).unwrap()), 0.0);
        }
    }
}
