//! Pooled ROC curve and trapezoidal AUC for probability maps.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, ProbMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Voxels with `p >= threshold` are called positive. The first point has
    /// an infinite threshold.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Ordered by decreasing threshold, hence non-decreasing FPR and TPR.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// `threshold,fpr,tpr` rows followed by an `AUC,<value>` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        let _ = writeln!(s, "AUC,{}", self.auc);
        s
    }
}

/// How thresholds are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Thresholds {
    /// Every distinct score.
    #[default]
    Unique,
    /// `n` evenly spaced values from 1 down to 0.
    Uniform(usize),
}

/// One case's contribution: scores, reference labels and the region in
/// which voxels are counted.
#[derive(Debug, Clone, Copy)]
pub struct RocInput<'a> {
    pub prob: &'a ProbMap,
    pub reference: &'a BinaryMask,
    pub region: &'a BinaryMask,
}

/// Single curve over the region voxels of every input.
pub fn roc_curve(inputs: &[RocInput<'_>], thresholds: Thresholds) -> Result<RocCurve> {
    let mut samples: Vec<(f32, bool)> = Vec::new();
    for inp in inputs {
        inp.prob.geometry().ensure_same(inp.reference.geometry(), "ROC scores vs reference")?;
        inp.prob.geometry().ensure_same(inp.region.geometry(), "ROC scores vs region")?;
        samples.extend(
            inp.prob
                .voxels()
                .iter()
                .zip(inp.reference.voxels())
                .zip(inp.region.voxels())
                .filter(|(_, &m)| m)
                .map(|((&p, &r), _)| (p, r)),
        );
    }
    roc_from_samples(samples, thresholds)
}

/// Curve over raw `(score, is_positive)` pairs.
pub fn roc_from_samples(mut samples: Vec<(f32, bool)>, thresholds: Thresholds) -> Result<RocCurve> {
    let pos = samples.iter().filter(|s| s.1).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "ROC region needs positive and negative voxels, got {pos} / {neg}"
        )));
    }
    samples.sort_by(|a, b| b.0.total_cmp(&a.0));
    let taus: Vec<f64> = match thresholds {
        Thresholds::Unique => {
            let mut t: Vec<f64> = samples.iter().map(|s| f64::from(s.0)).collect();
            t.dedup();
            t
        }
        Thresholds::Uniform(n) if n >= 2 => (0..n).map(|k| 1.0 - k as f64 / (n - 1) as f64).collect(),
        Thresholds::Uniform(n) => {
            return Err(Error::InvalidArgument(format!("need at least 2 uniform thresholds, got {n}")))
        }
    };
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp, mut i) = (0usize, 0usize, 0usize);
    for tau in taus {
        while i < samples.len() && f64::from(samples[i].0) >= tau {
            if samples[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: tau,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let s = vec![(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        let c = roc_from_samples(s, Thresholds::Unique).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.points.first().unwrap().fpr, 0.0);
        assert_eq!((c.points.last().unwrap().fpr, c.points.last().unwrap().tpr), (1.0, 1.0));
    }

    #[test]
    fn ties_count_half() {
        let s = vec![(0.5, true), (0.5, false)];
        assert_eq!(roc_from_samples(s, Thresholds::Unique).unwrap().auc, 0.5);
    }

    #[test]
    fn uniform_thresholds_and_csv() {
        let s = vec![(0.9, true), (0.6, false), (0.4, true), (0.1, false)];
        let c = roc_from_samples(s, Thresholds::Uniform(11)).unwrap();
        assert_eq!(c.points.len(), 12);
        assert!((c.auc - 0.75).abs() < 1e-12);
        let csv = c.to_csv();
        assert!(csv.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
        assert!(csv.ends_with("AUC,0.75\n"));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(roc_from_samples(vec![(0.2, true)], Thresholds::Unique).is_err());
        assert!(roc_from_samples(vec![(0.2, true), (0.1, false)], Thresholds::Uniform(1)).is_err());
    }
}
