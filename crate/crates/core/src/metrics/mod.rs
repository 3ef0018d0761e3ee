//! Evaluation metrics: overlap, confusion rates, surface distances, HU and
//! volume differentials, lesion burden, ROC/AUC and report aggregation.

mod distance;
mod overlap;
mod report;
mod roc;

pub use distance::{
    directed_mean_distance, squared_distance_transform, surface, surface_distances, SurfaceDistances,
};
pub use overlap::{
    confusion, dice, hu_differentials, jaccard, lesion_volume_stats, volume_differentials, ConfusionCounts,
    LesionVolumeStats,
};
pub use report::{mean_sd, CaseMetrics, ColumnSummary, EvalMode, MetricsTable};
pub use roc::{roc_curve, roc_from_samples, RocCurve, RocInput, RocPoint, Thresholds};

use crate::error::Result;
use crate::preprocess::bounding_box;
use crate::volume::{BinaryMask, Volume};

/// Lung-segmentation metrics of one case.
pub fn evaluate_lung_case(ct: &Volume, reference: &BinaryMask, pred: &BinaryMask) -> Result<CaseMetrics> {
    let hu = if pred.count() > 0 {
        hu_differentials(ct, reference, pred)?
    } else {
        None
    };
    let (rel_vol, abs_vol) = volume_differentials(reference, pred)?;
    Ok(CaseMetrics {
        dice: Some(dice(reference, pred)?),
        jaccard: Some(jaccard(reference, pred)?),
        rel_mean_hu_diff_pct: hu.map(|h| h.0),
        abs_rel_mean_hu_diff_pct: hu.map(|h| h.1),
        rel_vol_diff_pct: Some(rel_vol),
        abs_rel_vol_diff_pct: Some(abs_vol),
        ..CaseMetrics::default()
    })
}

/// Lesion metrics of one case. Confusion rates are counted inside the
/// reference lung; burden ratios are relative to the reference lung.
pub fn evaluate_lesion_case(
    lung_ref: &BinaryMask,
    lesion_ref: &BinaryMask,
    lesion_pred: &BinaryMask,
    use_spacing: bool,
) -> Result<CaseMetrics> {
    let c = confusion(lesion_ref, lesion_pred, lung_ref)?;
    let dist = if lesion_ref.count() > 0 && lesion_pred.count() > 0 {
        Some(surface_distances(lesion_ref, lesion_pred, use_spacing)?)
    } else {
        None
    };
    let stats = lesion_volume_stats(lung_ref, lesion_ref, lesion_pred)?;
    Ok(CaseMetrics {
        dice: Some(dice(lesion_ref, lesion_pred)?),
        jaccard: Some(jaccard(lesion_ref, lesion_pred)?),
        fnr: c.fnr(),
        fpr: c.fpr(),
        avg_hausdorff: dist.map(|d| d.avg_hausdorff),
        mean_surface_dist: dist.map(|d| d.mean_surface_dist),
        lesion_lung_ratio_ref: Some(stats.ratio_ref),
        lesion_lung_ratio_pred: Some(stats.ratio_pred),
        rel_lesion_vol_err_pct: stats.rel_error_pct,
        abs_rel_lesion_vol_err_pct: stats.rel_error_pct.map(f64::abs),
        ..CaseMetrics::default()
    })
}

/// Box-shaped region covering the bounding box of `lung`.
pub fn bounding_region(lung: &BinaryMask) -> Result<BinaryMask> {
    let b = bounding_box(lung, 0)?;
    BinaryMask::from_fn(*lung.geometry(), |x, y, z| b.contains(x, y, z))
}
