//! The ablation report: every arm on every seed, plus sweeps of the MAM
//! threshold θ and the unlabeled-slice ratio r, rendered as a text table and
//! plot-ready CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::experiment::{build_datasets, run_arms, Arm, SeedOutcome, Setup};
use crate::config::ReportConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub seed: u64,
    pub value: f64,
    pub finetune_slices: usize,
    pub mined: usize,
    pub mined_true: usize,
    pub suspicious: usize,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub outcomes: Vec<SeedOutcome>,
    pub theta: Vec<SweepPoint>,
    pub ratio: Vec<SweepPoint>,
}

fn point(o: &SeedOutcome, value: f64, arm: Arm) -> SweepPoint {
    SweepPoint {
        seed: o.seed,
        value,
        finetune_slices: o.finetune_slices,
        mined: o.mining.mined.len(),
        mined_true: o.mining.mined_true,
        suspicious: o.mining.suspicious.len(),
        average: o.results[&arm].average,
    }
}

/// Runs `arms` on every seed, and the sweeps with MAM+NRM.
pub fn run_report(setup: &Setup, cfg: &ReportConfig, arms: &[Arm]) -> Result<Report> {
    let mut report = Report {
        outcomes: Vec::new(),
        theta: Vec::new(),
        ratio: Vec::new(),
    };
    for &seed in &cfg.seeds {
        let data = build_datasets(setup, seed)?;
        report.outcomes.push(run_arms(setup, &data, arms, seed)?);
        for &theta in &cfg.theta_sweep {
            let mut s = setup.clone();
            s.mining.theta = theta;
            report.theta.push(point(&run_arms(&s, &data, &[Arm::MamNrm], seed)?, theta, Arm::MamNrm));
        }
        for &r in &cfg.ratio_sweep {
            let mut s = setup.clone();
            s.mining.unlabeled_ratio = r;
            report.ratio.push(point(&run_arms(&s, &data, &[Arm::MamNrm], seed)?, r, Arm::MamNrm));
        }
    }
    Ok(report)
}

impl Report {
    /// Arms present in every outcome, in declaration order.
    pub fn arms(&self) -> Vec<Arm> {
        Arm::ALL
            .into_iter()
            .filter(|a| !self.outcomes.is_empty() && self.outcomes.iter().all(|o| o.results.contains_key(a)))
            .collect()
    }

    /// Mean average sensitivity of `arm` over seeds.
    pub fn mean(&self, arm: Arm) -> f64 {
        let v: Vec<f64> = self.outcomes.iter().map(|o| o.results[&arm].average).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Pooled fraction of mined boxes that are masked-out lesions.
    pub fn mam_precision(&self) -> f64 {
        let mined: usize = self.outcomes.iter().map(|o| o.mining.mined.len()).sum();
        let hit: usize = self.outcomes.iter().map(|o| o.mining.mined_true).sum();
        if mined == 0 {
            1.0
        } else {
            hit as f64 / mined as f64
        }
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        write!(s, "{:<18}", "arm").unwrap();
        for o in &self.outcomes {
            write!(s, " {:>9}", format!("seed {}", o.seed)).unwrap();
        }
        writeln!(s, " {:>9}", "mean").unwrap();
        for arm in self.arms() {
            write!(s, "{:<18}", arm.as_str()).unwrap();
            for o in &self.outcomes {
                write!(s, " {:>9.4}", o.results[&arm].average).unwrap();
            }
            writeln!(s, " {:>9.4}", self.mean(arm)).unwrap();
        }
        writeln!(s).unwrap();
        writeln!(
            s,
            "{:<6} {:>8} {:>7} {:>10} {:>10} {:>12} {:>12}",
            "seed", "slices", "mined", "mined_true", "suspicious", "susp_true", "hidden_slices"
        )
        .unwrap();
        for o in &self.outcomes {
            let m = &o.mining;
            writeln!(
                s,
                "{:<6} {:>8} {:>7} {:>10} {:>10} {:>12} {:>12}",
                o.seed,
                o.finetune_slices,
                m.mined.len(),
                m.mined_true,
                m.suspicious.len(),
                m.suspicious_true,
                m.hidden_on_slices
            )
            .unwrap();
        }
        writeln!(s, "pooled MAM precision {:.4}", self.mam_precision()).unwrap();
        s
    }

    pub fn render_curves(&self) -> String {
        let mut s = String::from("arm,seed,group,fp_level,sensitivity\n");
        for o in &self.outcomes {
            for (arm, r) in &o.results {
                let mut groups = vec![("all", r)];
                groups.extend(r.per_organ.iter().map(|(k, v)| (k.as_str(), v)));
                for (g, r) in groups {
                    for (l, v) in r.levels.iter().zip(&r.sensitivity) {
                        writeln!(s, "{},{},{g},{l:.6},{v:.6}", arm.as_str(), o.seed).unwrap();
                    }
                }
            }
        }
        s
    }

    fn render_sweep(name: &str, points: &[SweepPoint]) -> String {
        let mut s = format!("seed,{name},finetune_slices,mined,mined_true,suspicious,average_sensitivity\n");
        for p in points {
            writeln!(
                s,
                "{},{:.6},{},{},{},{},{:.6}",
                p.seed, p.value, p.finetune_slices, p.mined, p.mined_true, p.suspicious, p.average
            )
            .unwrap();
        }
        s
    }

    /// Writes `summary.txt`, `froc_curves.csv`, `theta_sweep.csv` and `ratio_sweep.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.txt"), self.render_table())?;
        fs::write(dir.join("froc_curves.csv"), self.render_curves())?;
        fs::write(dir.join("theta_sweep.csv"), Self::render_sweep("theta", &self.theta))?;
        fs::write(dir.join("ratio_sweep.csv"), Self::render_sweep("ratio", &self.ratio))?;
        Ok(())
    }
}
