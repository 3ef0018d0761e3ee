//! Directory-level operations behind the command-line verbs, and the
//! end-to-end `pipeline` run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lesion::{infer_lesions, mean_prob_gap, predict_lung, LesionResult};
use crate::metrics::{
    bounding_region, evaluate_lesion_case, evaluate_lung_case, mean_sd, roc_curve, EvalMode, MetricsTable,
    RocCurve, RocInput, Thresholds,
};
use crate::network::{load_params, save_params, ArchitectureSpec, ModelParams, Network};
use crate::par;
use crate::phantom::{generate_dataset, load_case, read_index, IndexEntry};
use crate::training::{train_model, Role, TrainConfig, TrainReport, TrainingCase};
use crate::volume::{read_typed, write_volume, BinaryMask, ProbMap, Volume};

const TEST_SEED_SALT: u64 = 0x7465_7374_5345_5421;

pub fn lung_file(id: &str) -> String {
    format!("{id}_lung.vhdr")
}

pub fn lesion_file(id: &str) -> String {
    format!("{id}_lesion.vhdr")
}

pub fn lesion_prob_file(id: &str) -> String {
    format!("{id}_lesion_prob.vhdr")
}

pub fn covid_prob_file(id: &str) -> String {
    format!("{id}_covid_prob.vhdr")
}

pub fn norm_prob_file(id: &str) -> String {
    format!("{id}_norm_prob.vhdr")
}

/// Training history written next to a weight file: `dlnorm.w` →
/// `dlnorm.train.csv`.
pub fn report_path(weights: &Path) -> PathBuf {
    weights.with_extension("train.csv")
}

/// Case id for a stand-alone CT file: the file stem without a `_ct` suffix.
pub fn case_id_from_path(ct: &Path) -> String {
    let stem = ct.file_stem().and_then(|s| s.to_str()).unwrap_or("case");
    stem.strip_suffix("_ct").unwrap_or(stem).to_string()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn select(entries: Vec<IndexEntry>, label: Option<Role>) -> Vec<IndexEntry> {
    entries
        .into_iter()
        .filter(|e| label.is_none_or(|l| e.label == l))
        .collect()
}

pub fn network() -> Network {
    Network::new(ArchitectureSpec::default())
}

/// Trains the model for `cfg.train.role` on the matching cases of `data`,
/// writes the weights to `out` and the epoch history to [`report_path`].
pub fn train_from_dir(data: &Path, cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    let role = cfg.train.role;
    let entries = select(read_index(data)?, Some(role));
    if entries.is_empty() {
        return Err(Error::format(data, format!("no {role} cases to train on")));
    }
    let cases = par::try_map_indexed(entries.len(), |i| {
        let c = load_case(data, &entries[i])?;
        Ok::<_, Error>(TrainingCase {
            id: c.id,
            ct: c.ct,
            lung: c.lung,
        })
    })?;
    log::info!("training {role} model on {} cases", cases.len());
    let net = network();
    let (params, mut report) = train_model(&cases, &cfg.train, &cfg.preprocess, &net)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_params(&params, out)?;
    write_text(&report_path(out), &report.to_csv())?;
    report.checkpoint = Some(out.to_path_buf());
    Ok(report)
}

pub fn load_model(path: &Path, net: &Network) -> Result<ModelParams> {
    load_params(path, net)
}

/// Runs lesion inference on one CT and writes the lesion probability, lesion
/// mask, lung mask and both lung probability maps into `out_dir`.
pub fn infer_case(
    ct: &Volume,
    id: &str,
    net: &Network,
    covid: &ModelParams,
    norm: &ModelParams,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<LesionResult> {
    let r = infer_lesions(ct, net, covid, norm, &cfg.preprocess, &cfg.lesion, id)?;
    ensure_dir(out_dir)?;
    write_volume(&r.lesion_prob, out_dir.join(lesion_prob_file(id)))?;
    write_volume(&r.lesion_mask, out_dir.join(lesion_file(id)))?;
    write_volume(&r.lung_mask, out_dir.join(lung_file(id)))?;
    write_volume(&r.covid_prob, out_dir.join(covid_prob_file(id)))?;
    write_volume(&r.norm_prob, out_dir.join(norm_prob_file(id)))?;
    Ok(r)
}

/// [`infer_case`] over every (optionally label-filtered) case of `data`.
/// Returns the processed case ids.
pub fn infer_dir(
    data: &Path,
    covid: &ModelParams,
    norm: &ModelParams,
    cfg: &RunConfig,
    out_dir: &Path,
    label: Option<Role>,
) -> Result<Vec<String>> {
    let net = network();
    let mut ids = Vec::new();
    for e in select(read_index(data)?, label) {
        let ct: Volume = read_typed(data.join(&e.ct))?;
        let r = infer_case(&ct, &e.id, &net, covid, norm, cfg, out_dir)?;
        log::info!("{}: {} lesion voxels", e.id, r.lesion_mask.count());
        ids.push(e.id);
    }
    Ok(ids)
}

/// Lung masks from a single model for every (optionally label-filtered)
/// case of `data`, written as `<id>_lung.vhdr`.
pub fn predict_lung_dir(
    data: &Path,
    model: &ModelParams,
    cfg: &RunConfig,
    out_dir: &Path,
    label: Option<Role>,
) -> Result<Vec<String>> {
    let net = network();
    ensure_dir(out_dir)?;
    let mut ids = Vec::new();
    for e in select(read_index(data)?, label) {
        let ct: Volume = read_typed(data.join(&e.ct))?;
        let (_, mask) = predict_lung(&ct, &net, model, &cfg.preprocess, cfg.lesion.tau_lung, &e.id)?;
        write_volume(&mask, out_dir.join(lung_file(&e.id)))?;
        ids.push(e.id);
    }
    Ok(ids)
}

/// Per-case metrics of the predictions in `pred` against the references in
/// `data`.
pub fn evaluate_dir(
    data: &Path,
    pred: &Path,
    mode: EvalMode,
    label: Option<Role>,
    use_spacing: bool,
) -> Result<MetricsTable> {
    let entries = select(read_index(data)?, label);
    if entries.is_empty() {
        return Err(Error::format(data, "no cases to evaluate"));
    }
    let rows = par::try_map_indexed(entries.len(), |i| {
        let e = &entries[i];
        let case = load_case(data, e)?;
        let m = match mode {
            EvalMode::Lung => {
                let p: BinaryMask = read_typed(pred.join(lung_file(&e.id)))?;
                evaluate_lung_case(&case.ct, &case.lung, &p)?
            }
            EvalMode::Lesion => {
                let p: BinaryMask = read_typed(pred.join(lesion_file(&e.id)))?;
                evaluate_lesion_case(&case.lung, &case.lesion, &p, use_spacing)?
            }
        };
        Ok::<_, Error>((e.id.clone(), m))
    })?;
    Ok(MetricsTable { mode, rows })
}

/// Pooled ROC of the lesion probability maps in `pred`, counted inside the
/// bounding box of each case's predicted lung.
pub fn roc_dir(data: &Path, pred: &Path, label: Option<Role>, thresholds: Thresholds) -> Result<RocCurve> {
    let entries = select(read_index(data)?, label);
    let loaded = par::try_map_indexed(entries.len(), |i| {
        let e = &entries[i];
        let prob: ProbMap = read_typed(pred.join(lesion_prob_file(&e.id)))?;
        let lung: BinaryMask = read_typed(pred.join(lung_file(&e.id)))?;
        let reference: BinaryMask = read_typed(data.join(&e.lesion))?;
        Ok::<_, Error>((prob, reference, bounding_region(&lung)?))
    })?;
    let inputs: Vec<RocInput<'_>> = loaded
        .iter()
        .map(|(prob, reference, region)| RocInput {
            prob,
            reference,
            region,
        })
        .collect();
    roc_curve(&inputs, thresholds)
}

/// Mean `p_covid - p_norm` on reference lesion voxels per case with lesions.
pub fn prob_gap_dir(data: &Path, pred: &Path, label: Option<Role>) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for e in select(read_index(data)?, label) {
        let reference: BinaryMask = read_typed(data.join(&e.lesion))?;
        if reference.count() == 0 {
            continue;
        }
        let pc: ProbMap = read_typed(pred.join(covid_prob_file(&e.id)))?;
        let pn: ProbMap = read_typed(pred.join(norm_prob_file(&e.id)))?;
        out.push((e.id, mean_prob_gap(&pc, &pn, &reference)?));
    }
    Ok(out)
}

/// Headline numbers of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub lung_dice_norm: Vec<f64>,
    pub lung_dice_covid: Vec<f64>,
    pub lesion_dice: Vec<f64>,
    pub prob_gap: Vec<f64>,
    /// Predicted lesion/lung volume ratio on the normal held-out cases.
    pub normal_lesion_ratio: Vec<f64>,
    pub roc: RocCurve,
}

impl PipelineSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,mean,sd,min,max\n");
        let rows = [
            ("lung_dice_dlnorm", &self.lung_dice_norm),
            ("lung_dice_dlcovid", &self.lung_dice_covid),
            ("lesion_dice", &self.lesion_dice),
            ("prob_gap", &self.prob_gap),
            ("normal_lesion_lung_ratio", &self.normal_lesion_ratio),
        ];
        for (name, v) in rows {
            let (m, sd, _) = mean_sd(v.iter().map(|&x| Some(x)));
            let min = v.iter().copied().reduce(f64::min);
            let max = v.iter().copied().reduce(f64::max);
            let cell = |x: Option<f64>| x.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{name},{},{},{},{}", cell(m), cell(sd), cell(min), cell(max));
        }
        let _ = writeln!(s, "auc,{},,,", self.roc.auc);
        s
    }
}

fn column(table: &MetricsTable, get: impl Fn(&crate::metrics::CaseMetrics) -> Option<f64>) -> Vec<f64> {
    table.rows.iter().filter_map(|(_, m)| get(m)).collect()
}

/// Generates training and held-out phantoms, trains both models, runs lung
/// and lesion inference on the held-out cases and writes every report under
/// `out`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineSummary> {
    cfg.validate()?;
    let d = &cfg.dataset;
    let train_dir = out.join("train");
    let test_dir = out.join("test");
    let model_dir = out.join("models");
    let report_dir = out.join("reports");
    let lung_dir = out.join("pred").join("lung");
    let lesion_dir = out.join("pred").join("lesion");

    log::info!("generating phantoms");
    generate_dataset(&cfg.phantom, d.n_normal, d.n_covid, d.seed, &train_dir)?;
    generate_dataset(
        &cfg.phantom,
        d.n_test_normal,
        d.n_test_covid,
        d.seed ^ TEST_SEED_SALT,
        &test_dir,
    )?;

    let net = network();
    let mut models = Vec::new();
    for (role, name) in [(Role::Normal, "dlnorm.w"), (Role::Covid, "dlcovid.w")] {
        let run = RunConfig {
            train: TrainConfig { role, ..cfg.train.clone() },
            ..cfg.clone()
        };
        let path = model_dir.join(name);
        train_from_dir(&train_dir, &run, &path)?;
        models.push(load_model(&path, &net)?);
    }
    let (norm, covid) = (&models[0], &models[1]);

    log::info!("predicting held-out lungs");
    predict_lung_dir(&test_dir, norm, cfg, &lung_dir, Some(Role::Normal))?;
    predict_lung_dir(&test_dir, covid, cfg, &lung_dir, Some(Role::Covid))?;
    log::info!("inferring held-out lesions");
    infer_dir(&test_dir, covid, norm, cfg, &lesion_dir, None)?;

    let spacing = cfg.metrics.use_spacing;
    let lung_norm = evaluate_dir(&test_dir, &lung_dir, EvalMode::Lung, Some(Role::Normal), spacing)?;
    let lung_covid = evaluate_dir(&test_dir, &lung_dir, EvalMode::Lung, Some(Role::Covid), spacing)?;
    let lesion = evaluate_dir(&test_dir, &lesion_dir, EvalMode::Lesion, Some(Role::Covid), spacing)?;
    let normal = evaluate_dir(&test_dir, &lesion_dir, EvalMode::Lesion, Some(Role::Normal), spacing)?;
    let roc = roc_dir(&test_dir, &lesion_dir, Some(Role::Covid), cfg.metrics.roc_thresholds)?;
    let gaps = prob_gap_dir(&test_dir, &lesion_dir, Some(Role::Covid))?;

    write_text(&report_dir.join("lung_dlnorm.csv"), &lung_norm.to_csv())?;
    write_text(&report_dir.join("lung_dlcovid.csv"), &lung_covid.to_csv())?;
    write_text(&report_dir.join("lesion_covid.csv"), &lesion.to_csv())?;
    write_text(&report_dir.join("lesion_normal.csv"), &normal.to_csv())?;
    write_text(&report_dir.join("roc.csv"), &roc.to_csv())?;
    let mut gap_csv = String::from("case_id,prob_gap\n");
    for (id, g) in &gaps {
        let _ = writeln!(gap_csv, "{id},{g}");
    }
    write_text(&report_dir.join("prob_gap.csv"), &gap_csv)?;

    let summary = PipelineSummary {
        lung_dice_norm: column(&lung_norm, |m| m.dice),
        lung_dice_covid: column(&lung_covid, |m| m.dice),
        lesion_dice: column(&lesion, |m| m.dice),
        prob_gap: gaps.iter().map(|g| g.1).collect(),
        normal_lesion_ratio: column(&normal, |m| m.lesion_lung_ratio_pred),
        roc,
    };
    write_text(&report_dir.join("summary.csv"), &summary.to_csv())?;
    Ok(summary)
}
