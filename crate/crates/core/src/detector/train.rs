//! Mini-batch Adam on the gated multi-task loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heads::{gated_loss, sample_loss, HeadParams, Label, TrainSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the gate loss.
    pub lambda_gate: f64,
    /// Ridge penalty on the per-column weight adjustments.
    pub delta_decay: f64,
    /// Epoch fractions after which the learning rate drops tenfold.
    pub lr_drops: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            epochs: 30,
            batch_size: 64,
            seed: 1,
            lambda_gate: 1.0,
            delta_decay: 1.0,
            lr_drops: vec![0.5, 0.75],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidInput("need lr >= 0 and batch_size > 0".into()));
        }
        if self.lambda_gate < 0.0 || self.delta_decay < 0.0 {
            return Err(Error::InvalidInput("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.epochs.max(1) as f64;
        let drops = self.lr_drops.iter().filter(|&&f| frac >= f).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

/// Trains `init` in place order-deterministically and returns the result.
pub fn train_heads(samples: &[TrainSample], init: HeadParams, cfg: &TrainConfig) -> Result<HeadParams> {
    cfg.validate()?;
    init.validate()?;
    let used: Vec<&TrainSample> = samples.iter().filter(|s| s.label != Label::Ignore).collect();
    let has_pos = used.iter().any(|s| s.label == Label::Positive);
    let has_neg = used.iter().any(|s| s.label == Label::Negative);
    if !has_pos || !has_neg {
        return Err(Error::InvalidInput(
            "training needs at least one positive and one negative sample".into(),
        ));
    }
    let mut params = init;
    if cfg.lr == 0.0 || cfg.epochs == 0 {
        return Ok(params);
    }
    let n_params = params.theta.len();
    let delta_range = params.delta(0, 0)..params.gate(1);
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..used.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grad = vec![0.0; n_params];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in batch {
                loss += sample_loss(used[i], &params, &mut grad, cfg.lambda_gate);
            }
            let n = batch.len() as f64;
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            grad.iter_mut().for_each(|g| *g /= n);
            for k in delta_range.clone() {
                grad[k] += cfg.delta_decay * params.theta[k];
            }
            t += 1;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for k in 0..n_params {
                m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
                v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
                params.theta[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
            if params.theta.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged { epoch, step, loss: f64::NAN });
            }
        }
    }
    Ok(params)
}

/// Mean gated loss over all non-ignore samples.
pub fn training_loss(samples: &[TrainSample], params: &HeadParams, lambda: f64) -> Result<f64> {
    gated_loss(samples, params, lambda).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable(n: usize) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|i| {
                let pos = i % 2 == 0;
                let c = if pos { 1.0 } else { -1.0 };
                TrainSample {
                    features: vec![c + rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0), 0.5, 0.1],
                    label: if pos { Label::Positive } else { Label::Negative },
                    dataset_id: i % 4,
                    organ_targets: [1.0, 0.0, 0.0],
                }
            })
            .collect()
    }

    #[test]
    fn separable_fixture_trains_below_point_one() {
        let s = separable(400);
        let init = HeadParams::zeros(4);
        let before = training_loss(&s, &init, 1.0).unwrap();
        let p = train_heads(&s, init, &TrainConfig::default()).unwrap();
        let after = training_loss(&s, &p, 0.0).unwrap();
        assert!(after < 0.1, "loss {after}");
        assert!(training_loss(&s, &p, 1.0).unwrap() < before);
    }

    #[test]
    fn zero_lr_and_determinism() {
        let s = separable(100);
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert_eq!(train_heads(&s, HeadParams::zeros(4), &cfg).unwrap(), HeadParams::zeros(4));
        let a = train_heads(&s, HeadParams::zeros(4), &TrainConfig::default()).unwrap();
        let b = train_heads(&s, HeadParams::zeros(4), &TrainConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_class_rejected_and_divergence_reported() {
        let s: Vec<_> = separable(10).into_iter().filter(|s| s.label == Label::Positive).collect();
        assert!(train_heads(&s, HeadParams::zeros(4), &TrainConfig::default()).is_err());
        let mut bad = separable(10);
        bad[0].features[0] = f64::NAN;
        assert!(matches!(
            train_heads(&bad, HeadParams::zeros(4), &TrainConfig::default()),
            Err(Error::Diverged { .. })
        ));
    }
}
