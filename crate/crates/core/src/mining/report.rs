//! Mining summary as line-delimited records.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::mam::MatchPair;
use crate::domain::{Annotation, NUM_DATASETS};

pub const HISTOGRAM_BINS: usize = 20;
/// Upper edge of the distance histogram; unit embeddings are at most 2 apart.
pub const HISTOGRAM_MAX: f64 = 2.0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub theta: f64,
    pub sigma: f64,
    pub pairs: usize,
    pub mined_per_dataset: [usize; NUM_DATASETS],
    pub suspicious_per_dataset: [usize; NUM_DATASETS],
    pub distance_histogram: Vec<usize>,
}

impl MiningReport {
    pub fn new(theta: f64, sigma: f64, pairs: &[MatchPair], mined: &[Annotation], suspicious: &[Annotation]) -> Self {
        let mut r = MiningReport {
            theta,
            sigma,
            pairs: pairs.len(),
            distance_histogram: vec![0; HISTOGRAM_BINS],
            ..MiningReport::default()
        };
        for a in mined {
            r.mined_per_dataset[a.dataset_id] += 1;
        }
        for a in suspicious {
            r.suspicious_per_dataset[a.dataset_id] += 1;
        }
        for p in pairs {
            let b = ((p.distance / HISTOGRAM_MAX) * HISTOGRAM_BINS as f64) as usize;
            r.distance_histogram[b.min(HISTOGRAM_BINS - 1)] += 1;
        }
        r
    }

    /// `record<TAB>key<TAB>value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "param\ttheta\t{:.6}", self.theta).unwrap();
        writeln!(s, "param\tsigma\t{:.6}", self.sigma).unwrap();
        writeln!(s, "count\tpairs\t{}", self.pairs).unwrap();
        for d in 0..NUM_DATASETS {
            writeln!(s, "mined\td{d}\t{}", self.mined_per_dataset[d]).unwrap();
        }
        for d in 0..NUM_DATASETS {
            writeln!(s, "suspicious\td{d}\t{}", self.suspicious_per_dataset[d]).unwrap();
        }
        let w = HISTOGRAM_MAX / HISTOGRAM_BINS as f64;
        for (k, c) in self.distance_histogram.iter().enumerate() {
            writeln!(s, "distance\t{:.6}-{:.6}\t{c}", k as f64 * w, (k + 1) as f64 * w).unwrap();
        }
        s
    }
}
