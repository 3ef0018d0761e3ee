//! Lesion inference by subtracting the lung probability maps of the
//! diseased-anatomy and normal-anatomy models.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::network::{ModelParams, Network};
use crate::par;
use crate::preprocess::{
    bounding_box, prepare_slice, unresize_to_original, CropBox, Interp, NormalizedSlice, PreprocessConfig,
};
use crate::volume::{read_typed, BinaryMask, Geometry, ProbMap, Volume};

/// Slices per network call during inference.
const INFER_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct LesionConfig {
    pub tau_lesion: f64,
    pub tau_lung: f64,
    /// Keep only lesion voxels inside the predicted lung.
    pub restrict_to_lung: bool,
    /// Lung mask used for the crop box instead of the first-pass prediction.
    pub external_lung_mask: Option<PathBuf>,
}

impl Default for LesionConfig {
    fn default() -> Self {
        Self {
            tau_lesion: 0.3,
            tau_lung: 0.5,
            restrict_to_lung: true,
            external_lung_mask: None,
        }
    }
}

impl LesionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_lesion", self.tau_lesion), ("tau_lung", self.tau_lung)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {t}")));
            }
        }
        Ok(())
    }
}

/// All maps are in the geometry of the input CT.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionResult {
    /// `|p_covid - p_norm|`.
    pub lesion_prob: ProbMap,
    pub lesion_mask: BinaryMask,
    /// Lung mask of the diseased-anatomy model.
    pub lung_mask: BinaryMask,
    pub covid_prob: ProbMap,
    pub norm_prob: ProbMap,
    pub crop: CropBox,
}

/// Voxelwise `|p_covid - p_norm|`.
pub fn subtract_prob_maps(p_covid: &ProbMap, p_norm: &ProbMap) -> Result<ProbMap> {
    p_covid.zip_map(p_norm, |a, b| (a - b).abs())
}

/// Voxels with `p >= tau_lesion`, intersected with `lung` when
/// `restrict_to_lung` is set.
pub fn threshold_lesion(p: &ProbMap, cfg: &LesionConfig, lung: &BinaryMask) -> Result<BinaryMask> {
    cfg.validate()?;
    let tau = cfg.tau_lesion;
    let restrict = cfg.restrict_to_lung;
    p.zip_map(lung, |v, l| f64::from(v) >= tau && (l || !restrict))
}

/// Mean of `p_covid - p_norm` over the reference lesion voxels.
pub fn mean_prob_gap(p_covid: &ProbMap, p_norm: &ProbMap, lesion_ref: &BinaryMask) -> Result<f64> {
    p_covid.geometry().ensure_same(p_norm.geometry(), "covid vs normal probability map")?;
    p_covid.geometry().ensure_same(lesion_ref.geometry(), "probability map vs reference lesion")?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&a, &b), &m) in p_covid.voxels().iter().zip(p_norm.voxels()).zip(lesion_ref.voxels()) {
        if m {
            sum += f64::from(a) - f64::from(b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("reference lesion mask is empty".into()));
    }
    Ok(sum / n as f64)
}

/// Runs `models` on the given axial slices inside `crop` and returns one
/// probability volume per model, zero outside the crop box.
fn probability_volumes(
    ct: &Volume,
    network: &Network,
    models: &[&ModelParams],
    pre: &PreprocessConfig,
    crop: &CropBox,
    case_id: &str,
) -> Result<Vec<ProbMap>> {
    let g = ct.geometry();
    let slices: Vec<NormalizedSlice> =
        par::try_map_indexed(crop.depth(), |i| prepare_slice(ct, crop, crop.z.0 + i, pre, case_id))?;
    let mut out = Vec::with_capacity(models.len());
    for params in models {
        let mut voxels = vec![0.0f32; g.len()];
        for chunk in slices.chunks(INFER_BATCH) {
            let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
            let probs = network.predict(params, &images)?;
            for (s, p) in chunk.iter().zip(&probs) {
                let full = unresize_to_original(p, &s.provenance, Interp::Bilinear)?;
                let z = s.provenance.z;
                let dst = &mut voxels[z * g.slice_len()..(z + 1) * g.slice_len()];
                for (d, &v) in dst.iter_mut().zip(full.data()) {
                    *d = v.clamp(0.0, 1.0);
                }
            }
        }
        out.push(ProbMap::new(*g, voxels)?);
    }
    Ok(out)
}

/// Removes 6-connected components that touch the in-plane border of the
/// field of view. Lungs are enclosed by the body, so such components are
/// outside air the model has never been trained to reject.
pub fn drop_border_components(mask: &BinaryMask) -> BinaryMask {
    let g = *mask.geometry();
    let [nx, ny, nz] = g.dims();
    let v = mask.voxels();
    let mut out = v.to_vec();
    let mut stack: Vec<usize> = (0..g.len())
        .filter(|&i| {
            let [x, y, _] = g.coords(i);
            v[i] && (x == 0 || y == 0 || x + 1 == nx || y + 1 == ny)
        })
        .collect();
    for &i in &stack {
        out[i] = false;
    }
    while let Some(i) = stack.pop() {
        let [x, y, z] = g.coords(i);
        let neighbours = [
            (x > 0).then(|| i - 1),
            (x + 1 < nx).then(|| i + 1),
            (y > 0).then(|| i - nx),
            (y + 1 < ny).then(|| i + nx),
            (z > 0).then(|| i - nx * ny),
            (z + 1 < nz).then(|| i + nx * ny),
        ];
        for j in neighbours.into_iter().flatten() {
            if out[j] {
                out[j] = false;
                stack.push(j);
            }
        }
    }
    BinaryMask::new(g, out).expect("same geometry")
}

fn threshold(p: &ProbMap, tau: f64) -> Result<BinaryMask> {
    p.map(|v| f64::from(v) >= tau)
}

/// Crop box for the second pass: from the external mask when given,
/// otherwise from a first pass of `first_model` over whole slices.
fn locate_lungs(
    ct: &Volume,
    network: &Network,
    first_model: &ModelParams,
    pre: &PreprocessConfig,
    tau_lung: f64,
    external: Option<&BinaryMask>,
    case_id: &str,
) -> Result<CropBox> {
    let lung = match external {
        Some(m) => {
            ct.geometry().ensure_same(m.geometry(), "CT vs external lung mask")?;
            m.clone()
        }
        None => {
            let full = CropBox::full(ct.geometry());
            let p = probability_volumes(ct, network, &[first_model], pre, &full, case_id)?.remove(0);
            drop_border_components(&threshold(&p, tau_lung)?)
        }
    };
    if lung.count() == 0 {
        return Err(Error::EmptyMask(format!("{case_id}: no lung found")));
    }
    bounding_box(&lung, pre.crop_margin)
}

fn load_external(cfg: &LesionConfig, g: &Geometry) -> Result<Option<BinaryMask>> {
    cfg.external_lung_mask
        .as_ref()
        .map(|path| {
            let m: BinaryMask = read_typed(path)?;
            g.ensure_same(m.geometry(), "CT vs external lung mask")?;
            Ok(m)
        })
        .transpose()
}

/// Two-pass lung probability for a single model.
pub fn predict_lung(
    ct: &Volume,
    network: &Network,
    params: &ModelParams,
    pre: &PreprocessConfig,
    tau_lung: f64,
    case_id: &str,
) -> Result<(ProbMap, BinaryMask)> {
    pre.validate()?;
    let crop = locate_lungs(ct, network, params, pre, tau_lung, None, case_id)?;
    let p = probability_volumes(ct, network, &[params], pre, &crop, case_id)?.remove(0);
    let mask = threshold(&p, tau_lung)?;
    Ok((p, mask))
}

/// Full lesion inference on one CT volume.
pub fn infer_lesions(
    ct: &Volume,
    network: &Network,
    dl_covid: &ModelParams,
    dl_norm: &ModelParams,
    pre: &PreprocessConfig,
    cfg: &LesionConfig,
    case_id: &str,
) -> Result<LesionResult> {
    cfg.validate()?;
    pre.validate()?;
    dl_covid.ensure_compatible(dl_norm)?;
    let external = load_external(cfg, ct.geometry())?;
    let crop = locate_lungs(ct, network, dl_covid, pre, cfg.tau_lung, external.as_ref(), case_id)?;
    let mut maps = probability_volumes(ct, network, &[dl_covid, dl_norm], pre, &crop, case_id)?;
    let norm_prob = maps.pop().expect("two maps");
    let covid_prob = maps.pop().expect("two maps");
    let lesion_prob = subtract_prob_maps(&covid_prob, &norm_prob)?;
    let lung_mask = threshold(&covid_prob, cfg.tau_lung)?;
    let lesion_mask = threshold_lesion(&lesion_prob, cfg, &lung_mask)?;
    Ok(LesionResult {
        lesion_prob,
        lesion_mask,
        lung_mask,
        covid_prob,
        norm_prob,
        crop,
    })
}
