//! Gated multi-head scoring, score fusion, and the gated multi-task loss.
//!
//! Head `i` scores dataset column `d` with `logistic(v_id . f + b_id)` where
//! `v_id = u_i + delta_id`: `u_i` is shared by every column of head `i` and
//! `delta_id` is the column's own adjustment. The gate predicts organ weights
//! `w_1..w_3`; `w_0` is fixed at 1. Features are standardised with a frozen
//! per-feature affine map before scoring.

use std::path::Path;

use super::Scoring;
use crate::domain::{NUM_DATASETS, NUM_HEADS};
use crate::error::{Error, Result};
use crate::volio::embstore::{read_store, write_store, RowStore};

/// BCE clamp applied to probabilities.
pub const PROB_CLAMP: f64 = 1e-7;
pub const GATED: usize = NUM_HEADS - 1;

#[inline]
pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn bce(p: f64, y: f64) -> f64 {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

/// d BCE(logistic(z), y) / dz, zero where the clamp is active.
#[inline]
fn bce_logit_grad(p: f64, y: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        0.0
    } else {
        p - y
    }
}

/// Weighted mean of column `d` over heads; `w[0]` must be positive.
pub fn fuse(s: &[[f64; NUM_DATASETS]; NUM_HEADS], w: &[f64; NUM_HEADS], d: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..NUM_HEADS {
        num += w[i] * s[i][d];
        den += w[i];
    }
    num / den
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub dim: usize,
    /// Frozen standardisation: `f' = (f - mean) * scale`.
    pub norm_mean: Vec<f64>,
    pub norm_scale: Vec<f64>,
    /// Trainable parameters, see the index helpers for the layout.
    pub theta: Vec<f64>,
}

impl HeadParams {
    pub fn n_params(dim: usize) -> usize {
        (NUM_HEADS + NUM_HEADS * NUM_DATASETS + GATED) * dim + NUM_HEADS * NUM_DATASETS + GATED
    }

    pub fn zeros(dim: usize) -> Self {
        HeadParams {
            dim,
            norm_mean: vec![0.0; dim],
            norm_scale: vec![1.0; dim],
            theta: vec![0.0; Self::n_params(dim)],
        }
    }

    /// Offset of shared weight `u_i`.
    pub fn shared(&self, i: usize) -> usize {
        i * self.dim
    }

    /// Offset of column adjustment `delta_id`.
    pub fn delta(&self, i: usize, d: usize) -> usize {
        (NUM_HEADS + i * NUM_DATASETS + d) * self.dim
    }

    pub fn bias(&self, i: usize, d: usize) -> usize {
        (NUM_HEADS + NUM_HEADS * NUM_DATASETS + GATED) * self.dim + i * NUM_DATASETS + d
    }

    /// Offset of the gate weights for head `i` (1..=3).
    pub fn gate(&self, i: usize) -> usize {
        (NUM_HEADS + NUM_HEADS * NUM_DATASETS + i - 1) * self.dim
    }

    pub fn gate_bias(&self, i: usize) -> usize {
        self.bias(NUM_HEADS - 1, NUM_DATASETS - 1) + 1 + i
    }

    /// Effective weight `v_id` of head `i` for column `d`.
    pub fn weight(&self, i: usize, d: usize) -> Vec<f64> {
        let (u, v) = (self.shared(i), self.delta(i, d));
        (0..self.dim).map(|k| self.theta[u + k] + self.theta[v + k]).collect()
    }

    /// Whether parameter `k` belongs to a score column other than `d`.
    pub fn is_column_param(&self, k: usize, d: usize) -> Option<bool> {
        for i in 0..NUM_HEADS {
            for dd in 0..NUM_DATASETS {
                let o = self.delta(i, dd);
                if (o..o + self.dim).contains(&k) || k == self.bias(i, dd) {
                    return Some(dd != d);
                }
            }
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        if self.norm_mean.len() != self.dim
            || self.norm_scale.len() != self.dim
            || self.theta.len() != Self::n_params(self.dim)
        {
            return Err(Error::Contract(format!(
                "head parameters do not match feature dimension {}",
                self.dim
            )));
        }
        if self
            .theta
            .iter()
            .chain(&self.norm_mean)
            .chain(&self.norm_scale)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput("non-finite head parameter".into()));
        }
        Ok(())
    }

    /// Sets the standardisation from the mean and spread of `rows`.
    pub fn fit_normalizer<'a>(&mut self, rows: impl Iterator<Item = &'a [f64]>) {
        let mut n = 0.0;
        let mut sum = vec![0.0; self.dim];
        let mut sq = vec![0.0; self.dim];
        for r in rows {
            n += 1.0;
            for k in 0..self.dim {
                sum[k] += r[k];
                sq[k] += r[k] * r[k];
            }
        }
        if n == 0.0 {
            return;
        }
        for k in 0..self.dim {
            let m = sum[k] / n;
            let var = (sq[k] / n - m * m).max(0.0);
            self.norm_mean[k] = m;
            self.norm_scale[k] = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        }
    }

    pub fn normalize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.norm_mean)
            .zip(&self.norm_scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn logits(&self, x: &[f64]) -> ([[f64; NUM_DATASETS]; NUM_HEADS], [f64; GATED]) {
        let dot = |off: usize| -> f64 { (0..self.dim).map(|k| self.theta[off + k] * x[k]).sum() };
        let mut z = [[0.0; NUM_DATASETS]; NUM_HEADS];
        for (i, row) in z.iter_mut().enumerate() {
            let u = dot(self.shared(i));
            for (d, v) in row.iter_mut().enumerate() {
                *v = u + dot(self.delta(i, d)) + self.theta[self.bias(i, d)];
            }
        }
        let mut g = [0.0; GATED];
        for (j, v) in g.iter_mut().enumerate() {
            *v = dot(self.gate(j + 1)) + self.theta[self.gate_bias(j)];
        }
        (z, g)
    }

    pub fn to_store(&self) -> RowStore {
        assert!(self.dim >= NUM_DATASETS, "feature dimension too small to store biases");
        let mut s = RowStore::new(self.dim);
        let row = |off: usize| self.theta[off..off + self.dim].to_vec();
        let padded = |vals: Vec<f64>| {
            let mut v = vals;
            v.resize(self.dim, 0.0);
            v
        };
        s.push("norm_mean", &self.norm_mean).unwrap();
        s.push("norm_scale", &self.norm_scale).unwrap();
        for i in 0..NUM_HEADS {
            s.push(format!("shared{i}"), &row(self.shared(i))).unwrap();
        }
        for i in 0..NUM_HEADS {
            for d in 0..NUM_DATASETS {
                s.push(format!("delta{i}{d}"), &row(self.delta(i, d))).unwrap();
            }
        }
        for i in 1..NUM_HEADS {
            s.push(format!("gate{i}"), &row(self.gate(i))).unwrap();
        }
        for i in 0..NUM_HEADS {
            let b = (0..NUM_DATASETS).map(|d| self.theta[self.bias(i, d)]).collect();
            s.push(format!("bias{i}"), &padded(b)).unwrap();
        }
        let gb = (0..GATED).map(|j| self.theta[self.gate_bias(j)]).collect();
        s.push("gate_bias", &padded(gb)).unwrap();
        s
    }

    pub fn from_store(s: &RowStore) -> Result<Self> {
        let mut p = HeadParams::zeros(s.dim);
        let get = |name: &str| -> Result<Vec<f64>> {
            let i = s
                .ids
                .iter()
                .position(|id| id == name)
                .ok_or_else(|| Error::Contract(format!("parameter row '{name}' missing")))?;
            Ok(s.row_f64(i))
        };
        p.norm_mean = get("norm_mean")?;
        p.norm_scale = get("norm_scale")?;
        let dim = p.dim;
        let mut put = |off: usize, v: Vec<f64>| p.theta[off..off + dim].copy_from_slice(&v);
        for i in 0..NUM_HEADS {
            put(i * dim, get(&format!("shared{i}"))?);
            for d in 0..NUM_DATASETS {
                put((NUM_HEADS + i * NUM_DATASETS + d) * dim, get(&format!("delta{i}{d}"))?);
            }
        }
        for i in 1..NUM_HEADS {
            put((NUM_HEADS + NUM_HEADS * NUM_DATASETS + i - 1) * dim, get(&format!("gate{i}"))?);
        }
        for i in 0..NUM_HEADS {
            let b = get(&format!("bias{i}"))?;
            for d in 0..NUM_DATASETS {
                let k = p.bias(i, d);
                p.theta[k] = b[d];
            }
        }
        let gb = get("gate_bias")?;
        for j in 0..GATED {
            let k = p.gate_bias(j);
            p.theta[k] = gb[j];
        }
        p.validate()?;
        Ok(p)
    }

    /// Rounds every value to the storage precision.
    pub fn quantized(&self) -> Self {
        let q = |v: &Vec<f64>| v.iter().map(|&x| x as f32 as f64).collect();
        HeadParams {
            dim: self.dim,
            norm_mean: q(&self.norm_mean),
            norm_scale: q(&self.norm_scale),
            theta: q(&self.theta),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_store(path, &self.to_store())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&read_store(path)?)
    }
}

/// Scores a raw feature vector with every head, the gate, and the fused columns.
pub fn score_heads(features: &[f64], params: &HeadParams) -> Result<Scoring> {
    if features.len() != params.dim {
        return Err(Error::Contract(format!(
            "feature length {} does not match head dimension {}",
            features.len(),
            params.dim
        )));
    }
    let x = params.normalize(features);
    let (z, g) = params.logits(&x);
    let mut sc = Scoring::default();
    for i in 0..NUM_HEADS {
        for d in 0..NUM_DATASETS {
            sc.matrix[i][d] = logistic(z[i][d]);
        }
    }
    sc.gate[0] = 1.0;
    for j in 0..GATED {
        sc.gate[j + 1] = logistic(g[j]);
    }
    for d in 0..NUM_DATASETS {
        sc.fused[d] = fuse(&sc.matrix, &sc.gate, d);
    }
    Ok(sc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub features: Vec<f64>,
    pub label: Label,
    pub dataset_id: usize,
    /// Organ targets for gated heads 1..=3.
    pub organ_targets: [f64; GATED],
}

/// Mean over non-ignore samples of `sum_i w_i BCE(S_id, y) + lambda * sum_j BCE(w_j, t_j)`,
/// and its gradient with respect to `params.theta`. `w` is a constant in the
/// detection term.
pub fn gated_loss(samples: &[TrainSample], params: &HeadParams, lambda: f64) -> Result<(f64, Vec<f64>)> {
    let used: Vec<&TrainSample> = samples.iter().filter(|s| s.label != Label::Ignore).collect();
    if used.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut grad = vec![0.0; params.theta.len()];
    let mut total = 0.0;
    for s in &used {
        if s.features.len() != params.dim || s.dataset_id >= NUM_DATASETS {
            return Err(Error::Contract(format!(
                "training sample with {} features for dataset {} (expected {} features)",
                s.features.len(),
                s.dataset_id,
                params.dim
            )));
        }
        total += sample_loss(s, params, &mut grad, lambda);
    }
    let n = used.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

/// Adds one sample's gradient into `grad` and returns its loss.
pub(crate) fn sample_loss(s: &TrainSample, params: &HeadParams, grad: &mut [f64], lambda: f64) -> f64 {
    let x = params.normalize(&s.features);
    let (z, g) = params.logits(&x);
    let y = if s.label == Label::Positive { 1.0 } else { 0.0 };
    let d = s.dataset_id;
    let dim = params.dim;
    let mut w = [1.0; NUM_HEADS];
    let mut loss = 0.0;
    for j in 0..GATED {
        let wj = logistic(g[j]);
        w[j + 1] = wj;
        let t = s.organ_targets[j];
        loss += lambda * bce(wj, t);
        let gz = lambda * bce_logit_grad(wj, t);
        if gz != 0.0 {
            let off = params.gate(j + 1);
            for k in 0..dim {
                grad[off + k] += gz * x[k];
            }
            grad[params.gate_bias(j)] += gz;
        }
    }
    for i in 0..NUM_HEADS {
        let p = logistic(z[i][d]);
        loss += w[i] * bce(p, y);
        let gz = w[i] * bce_logit_grad(p, y);
        if gz != 0.0 {
            let (u, v) = (params.shared(i), params.delta(i, d));
            for k in 0..dim {
                grad[u + k] += gz * x[k];
                grad[v + k] += gz * x[k];
            }
            grad[params.bias(i, d)] += gz;
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_half_scores() {
        let p = HeadParams::zeros(5);
        let sc = score_heads(&[1.0, 2.0, 3.0, 4.0, 5.0], &p).unwrap();
        assert!(sc.matrix.iter().flatten().all(|&v| v == 0.5));
        assert_eq!(sc.gate, [1.0, 0.5, 0.5, 0.5]);
        assert!(score_heads(&[1.0], &p).is_err());
    }

    #[test]
    fn fuse_examples() {
        let mut s = [[0.0; 4]; 4];
        s[0][2] = 0.8;
        s[1][2] = 0.6;
        assert!((fuse(&s, &[1.0, 0.5, 0.0, 0.0], 2) - 1.1 / 1.5).abs() < 1e-12);
        assert_eq!(fuse(&s, &[1.0, 0.0, 0.0, 0.0], 2), 0.8);
    }

    #[test]
    fn single_head_bce_is_ln2() {
        let p = HeadParams::zeros(4);
        let s = TrainSample {
            features: vec![0.0; 4],
            label: Label::Positive,
            dataset_id: 1,
            organ_targets: [0.5; 3],
        };
        // With w = (1, .5, .5, .5) every head contributes ln 2; isolate head 0
        // by subtracting the gate and other-head terms analytically.
        let (l, _) = gated_loss(&[s], &p, 0.0).unwrap();
        assert!((l - 2.5 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn store_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = HeadParams::zeros(6);
        p.theta.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p.norm_mean = vec![0.25; 6];
        let q = p.quantized();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heads.bin");
        q.save(&path).unwrap();
        assert_eq!(HeadParams::load(&path).unwrap(), q);
    }

    fn random_batch(rng: &mut ChaCha8Rng, dim: usize, n: usize, d: Option<usize>) -> Vec<TrainSample> {
        (0..n)
            .map(|_| TrainSample {
                features: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: match rng.random_range(0..3) {
                    0 => Label::Positive,
                    1 => Label::Negative,
                    _ => Label::Ignore,
                },
                dataset_id: d.unwrap_or_else(|| rng.random_range(0..NUM_DATASETS)),
                organ_targets: [rng.random(), rng.random(), rng.random()],
            })
            .collect()
    }

    fn random_params(rng: &mut ChaCha8Rng, dim: usize) -> HeadParams {
        let mut p = HeadParams::zeros(dim);
        p.theta.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        p.norm_mean.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        p.norm_scale.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        p
    }

    /// Independent loss with the detection-term gate weights taken from
    /// `frozen` (the stop-gradient on `w`), written from the formula.
    fn oracle_loss(batch: &[TrainSample], p: &HeadParams, frozen: &HeadParams, lambda: f64) -> f64 {
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let ce = |q: f64, y: f64| {
            let q = q.clamp(1e-7, 1.0 - 1e-7);
            -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        };
        let dot = |q: &HeadParams, off: usize, x: &[f64]| -> f64 { x.iter().enumerate().map(|(k, v)| q.theta[off + k] * v).sum() };
        let used: Vec<_> = batch.iter().filter(|s| s.label != Label::Ignore).collect();
        let mut total = 0.0;
        for s in &used {
            let x: Vec<f64> = (0..p.dim).map(|k| (s.features[k] - p.norm_mean[k]) * p.norm_scale[k]).collect();
            let y = f64::from(u8::from(s.label == Label::Positive));
            let gate = |q: &HeadParams, j: usize| sig(dot(q, q.gate(j + 1), &x) + q.theta[q.gate_bias(j)]);
            let mut l = 0.0;
            for i in 0..NUM_HEADS {
                let wi = if i == 0 { 1.0 } else { gate(frozen, i - 1) };
                let z = dot(p, p.shared(i), &x) + dot(p, p.delta(i, s.dataset_id), &x) + p.theta[p.bias(i, s.dataset_id)];
                l += wi * ce(sig(z), y);
            }
            for j in 0..GATED {
                l += lambda * ce(gate(p, j), s.organ_targets[j]);
            }
            total += l;
        }
        total / used.len() as f64
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let p = random_params(&mut rng, 5);
            let mut batch = random_batch(&mut rng, 5, 12, None);
            batch[0].label = Label::Positive;
            let (l, g) = gated_loss(&batch, &p, 0.7).unwrap();
            assert!((l - oracle_loss(&batch, &p, &p, 0.7)).abs() < 1e-12);
            let h = 1e-5;
            for k in 0..p.theta.len() {
                let mut a = p.clone();
                let mut b = p.clone();
                a.theta[k] += h;
                b.theta[k] -= h;
                let fd = (oracle_loss(&batch, &a, &p, 0.7) - oracle_loss(&batch, &b, &p, 0.7)) / (2.0 * h);
                let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
                assert!(err < 1e-4, "param {k}: analytic {} vs numeric {fd}", g[k]);
            }
        }
    }

    #[test]
    fn other_columns_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 4);
        for d in 0..NUM_DATASETS {
            let mut batch = random_batch(&mut rng, 4, 20, Some(d));
            batch[0].label = Label::Negative;
            let (_, g) = gated_loss(&batch, &p, 1.0).unwrap();
            for (k, v) in g.iter().enumerate() {
                if p.is_column_param(k, d) == Some(true) {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn ignore_samples_change_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 4);
        let mut batch = random_batch(&mut rng, 4, 10, None);
        batch.retain(|s| s.label != Label::Ignore);
        batch.push(TrainSample {
            features: vec![0.1; 4],
            label: Label::Positive,
            dataset_id: 0,
            organ_targets: [1.0, 0.0, 0.0],
        });
        let base = gated_loss(&batch, &p, 1.0).unwrap();
        let mut more = batch.clone();
        for s in random_batch(&mut rng, 4, 30, None) {
            more.insert(rng.random_range(0..=more.len()), TrainSample { label: Label::Ignore, ..s });
        }
        assert_eq!(gated_loss(&more, &p, 1.0).unwrap(), base);
        let ignored: Vec<_> = more.into_iter().filter(|s| s.label == Label::Ignore).collect();
        assert!(matches!(gated_loss(&ignored, &p, 1.0), Err(Error::EmptyBatch)));
    }

    #[test]
    fn perfect_predictions_have_tiny_loss() {
        let mut p = HeadParams::zeros(1);
        for i in 0..NUM_HEADS {
            let k = p.bias(i, 0);
            p.theta[k] = 40.0;
        }
        for j in 0..GATED {
            let k = p.gate_bias(j);
            p.theta[k] = if j == 0 { 40.0 } else { -40.0 };
        }
        let s = TrainSample {
            features: vec![0.0],
            label: Label::Positive,
            dataset_id: 0,
            organ_targets: [1.0, 0.0, 0.0],
        };
        assert!(gated_loss(&[s], &p, 1.0).unwrap().0 <= 1e-5);
    }

    #[test]
    fn scores_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 6);
        let f: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sc = score_heads(&f, &p).unwrap();
        let x: Vec<f64> = (0..6).map(|k| (f[k] - p.norm_mean[k]) * p.norm_scale[k]).collect();
        for i in 0..NUM_HEADS {
            for d in 0..NUM_DATASETS {
                let v = p.weight(i, d);
                let z: f64 = v.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + p.theta[p.bias(i, d)];
                assert!((sc.matrix[i][d] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
            }
        }
        assert_eq!(sc.gate[0], 1.0);
    }

    proptest::proptest! {
        #[test]
        fn fuse_is_a_scale_free_weighted_mean(
            s in proptest::array::uniform4(proptest::array::uniform4(0.0..=1.0f64)),
            w in proptest::array::uniform3(0.0..=1.0f64),
            d in 0..NUM_DATASETS,
        ) {
            let w = [1.0, w[0], w[1], w[2]];
            let f = fuse(&s, &w, d);
            let lo = (0..NUM_HEADS).map(|i| s[i][d]).fold(f64::INFINITY, f64::min);
            let hi = (0..NUM_HEADS).map(|i| s[i][d]).fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
            let scaled = w.map(|v| 3.7 * v);
            proptest::prop_assert!((fuse(&s, &scaled, d) - f).abs() < 1e-12);
        }
    }
}
