//! Per-case metric rows, mean/SD aggregation and CSV emission.

use std::fmt::Write as _;

/// All per-case metrics; fields that do not apply or are undefined are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CaseMetrics {
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub rel_mean_hu_diff_pct: Option<f64>,
    pub abs_rel_mean_hu_diff_pct: Option<f64>,
    pub rel_vol_diff_pct: Option<f64>,
    pub abs_rel_vol_diff_pct: Option<f64>,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    pub avg_hausdorff: Option<f64>,
    pub mean_surface_dist: Option<f64>,
    pub lesion_lung_ratio_ref: Option<f64>,
    pub lesion_lung_ratio_pred: Option<f64>,
    pub rel_lesion_vol_err_pct: Option<f64>,
    pub abs_rel_lesion_vol_err_pct: Option<f64>,
}

type Column = (&'static str, fn(&CaseMetrics) -> Option<f64>);

const LUNG_COLUMNS: &[Column] = &[
    ("dice", |m| m.dice),
    ("jaccard", |m| m.jaccard),
    ("rel_mean_hu_diff_pct", |m| m.rel_mean_hu_diff_pct),
    ("abs_rel_mean_hu_diff_pct", |m| m.abs_rel_mean_hu_diff_pct),
    ("rel_vol_diff_pct", |m| m.rel_vol_diff_pct),
    ("abs_rel_vol_diff_pct", |m| m.abs_rel_vol_diff_pct),
];

const LESION_COLUMNS: &[Column] = &[
    ("dice", |m| m.dice),
    ("jaccard", |m| m.jaccard),
    ("fnr", |m| m.fnr),
    ("fpr", |m| m.fpr),
    ("avg_hausdorff", |m| m.avg_hausdorff),
    ("mean_surface_dist", |m| m.mean_surface_dist),
    ("lesion_lung_ratio_ref", |m| m.lesion_lung_ratio_ref),
    ("lesion_lung_ratio_pred", |m| m.lesion_lung_ratio_pred),
    ("rel_lesion_vol_err_pct", |m| m.rel_lesion_vol_err_pct),
    ("abs_rel_lesion_vol_err_pct", |m| m.abs_rel_lesion_vol_err_pct),
];

/// Which column set a report carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Lung,
    Lesion,
}

impl EvalMode {
    fn columns(self) -> &'static [Column] {
        match self {
            EvalMode::Lung => LUNG_COLUMNS,
            EvalMode::Lesion => LESION_COLUMNS,
        }
    }

    pub fn column_names(self) -> Vec<&'static str> {
        self.columns().iter().map(|c| c.0).collect()
    }
}

impl std::str::FromStr for EvalMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "lung" => Ok(EvalMode::Lung),
            "lesion" => Ok(EvalMode::Lesion),
            other => Err(crate::Error::InvalidArgument(format!(
                "unknown eval mode `{other}` (expected lung|lesion)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSummary {
    pub name: &'static str,
    /// `None` when every case is missing this column.
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub sd: Option<f64>,
    /// Number of cases with a value.
    pub count: usize,
}

/// Mean and population SD of `values`, ignoring missing entries.
pub fn mean_sd(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>, usize) {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return (None, None, 0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()), v.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub mode: EvalMode,
    pub rows: Vec<(String, CaseMetrics)>,
}

impl MetricsTable {
    pub fn new(mode: EvalMode) -> Self {
        Self { mode, rows: Vec::new() }
    }

    pub fn aggregate(&self) -> Vec<ColumnSummary> {
        self.mode
            .columns()
            .iter()
            .map(|&(name, get)| {
                let (mean, sd, count) = mean_sd(self.rows.iter().map(|(_, m)| get(m)));
                ColumnSummary { name, mean, sd, count }
            })
            .collect()
    }

    /// Header, one row per case, then `mean` and `sd` rows. Missing values
    /// are empty cells.
    pub fn to_csv(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let cols = self.mode.columns();
        let mut s = String::from("case_id");
        for (name, _) in cols {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for (id, m) in &self.rows {
            s.push_str(id);
            for (_, get) in cols {
                s.push(',');
                s.push_str(&cell(get(m)));
            }
            s.push('\n');
        }
        let agg = self.aggregate();
        for (label, pick) in [("mean", 0), ("sd", 1)] {
            s.push_str(label);
            for c in &agg {
                let _ = write!(s, ",{}", cell(if pick == 0 { c.mean } else { c.sd }));
            }
            s.push('\n');
        }
        s
    }
}
