//! Set-overlap, confusion and volume/intensity differentials.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Volume};

fn counts(reference: &BinaryMask, pred: &BinaryMask) -> Result<(usize, usize, usize)> {
    reference.geometry().ensure_same(pred.geometry(), "reference vs prediction")?;
    let mut inter = 0;
    for (&r, &p) in reference.voxels().iter().zip(pred.voxels()) {
        inter += usize::from(r && p);
    }
    Ok((inter, reference.count(), pred.count()))
}

/// `2|R∩P| / (|R|+|P|)`. Two empty masks score 1 and log a warning.
pub fn dice(reference: &BinaryMask, pred: &BinaryMask) -> Result<f64> {
    let (i, r, p) = counts(reference, pred)?;
    if r + p == 0 {
        log::warn!("dice of two empty masks is defined as 1");
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (r + p) as f64)
}

/// `|R∩P| / |R∪P|`, with the same empty-mask rule as [`dice`].
pub fn jaccard(reference: &BinaryMask, pred: &BinaryMask) -> Result<f64> {
    let (i, r, p) = counts(reference, pred)?;
    if r + p == 0 {
        log::warn!("jaccard of two empty masks is defined as 1");
        return Ok(1.0);
    }
    Ok(i as f64 / (r + p - i) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `FN / (FN + TP)`; `None` without reference positives.
    pub fn fnr(&self) -> Option<f64> {
        let d = self.fn_ + self.tp;
        (d > 0).then(|| self.fn_ as f64 / d as f64)
    }

    /// `FP / (FP + TN)`; `None` without reference negatives.
    pub fn fpr(&self) -> Option<f64> {
        let d = self.fp + self.tn;
        (d > 0).then(|| self.fp as f64 / d as f64)
    }

    pub fn tpr(&self) -> Option<f64> {
        self.fnr().map(|v| 1.0 - v)
    }
}

/// Voxelwise confusion counts inside `region`.
pub fn confusion(reference: &BinaryMask, pred: &BinaryMask, region: &BinaryMask) -> Result<ConfusionCounts> {
    reference.geometry().ensure_same(pred.geometry(), "reference vs prediction")?;
    reference.geometry().ensure_same(region.geometry(), "reference vs region")?;
    if region.count() == 0 {
        return Err(Error::EmptyMask("confusion region is empty".into()));
    }
    let mut c = ConfusionCounts::default();
    for ((&r, &p), &m) in reference.voxels().iter().zip(pred.voxels()).zip(region.voxels()) {
        if !m {
            continue;
        }
        match (r, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn mean_inside(ct: &Volume, mask: &BinaryMask, what: &str) -> Result<f64> {
    ct.geometry().ensure_same(mask.geometry(), what)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&v, &m) in ct.voxels().iter().zip(mask.voxels()) {
        if m {
            sum += f64::from(v);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask(format!("{what} is empty")));
    }
    Ok(sum / n as f64)
}

/// Relative mean HU difference `100 (mu_pred - mu_ref) / |mu_ref|` and its
/// absolute value. `None` when the reference mean is zero.
pub fn hu_differentials(ct: &Volume, reference: &BinaryMask, pred: &BinaryMask) -> Result<Option<(f64, f64)>> {
    let mu_ref = mean_inside(ct, reference, "reference mask")?;
    let mu_pred = mean_inside(ct, pred, "predicted mask")?;
    if mu_ref == 0.0 {
        return Ok(None);
    }
    let rel = 100.0 * (mu_pred - mu_ref) / mu_ref.abs();
    Ok(Some((rel, rel.abs())))
}

/// Relative volume difference `100 (|P| - |R|) / |R|` and its absolute value.
pub fn volume_differentials(reference: &BinaryMask, pred: &BinaryMask) -> Result<(f64, f64)> {
    let (_, r, p) = counts(reference, pred)?;
    if r == 0 {
        return Err(Error::EmptyMask("reference mask is empty".into()));
    }
    let rel = 100.0 * (p as f64 - r as f64) / r as f64;
    Ok((rel, rel.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionVolumeStats {
    pub ratio_ref: f64,
    pub ratio_pred: f64,
    /// `100 (|pred| - |ref|) / |ref|`; `None` for an empty reference.
    pub rel_error_pct: Option<f64>,
}

/// Lesion/lung volume ratios and relative lesion volume error.
pub fn lesion_volume_stats(
    lung: &BinaryMask,
    lesion_ref: &BinaryMask,
    lesion_pred: &BinaryMask,
) -> Result<LesionVolumeStats> {
    lung.geometry().ensure_same(lesion_ref.geometry(), "lung vs reference lesion")?;
    let (_, r, p) = counts(lesion_ref, lesion_pred)?;
    let l = lung.count();
    if l == 0 {
        return Err(Error::EmptyMask("lung mask is empty".into()));
    }
    Ok(LesionVolumeStats {
        ratio_ref: r as f64 / l as f64,
        ratio_pred: p as f64 / l as f64,
        rel_error_pct: (r > 0).then(|| 100.0 * (p as f64 - r as f64) / r as f64),
    })
}
