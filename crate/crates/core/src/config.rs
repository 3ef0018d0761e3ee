//! `key = value` run configuration covering every tunable of the pipeline.
//!
//! Blank lines and `#` comments are ignored, unknown keys are rejected and
//! relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lesion::LesionConfig;
use crate::metrics::Thresholds;
use crate::phantom::PhantomConfig;
use crate::preprocess::PreprocessConfig;
use crate::training::TrainConfig;

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("hu_min", "-1000", "lower end of the HU window"),
    ("hu_max", "200", "upper end of the HU window"),
    ("target_rows", "296", "network window height"),
    ("target_cols", "216", "network window width"),
    ("crop_margin", "0", "voxels added around the lung bounding box"),
    ("lr_start", "0.02", "learning rate of the first epoch"),
    ("lr_end", "0.001", "learning rate of the last epoch"),
    ("batch_size", "20", "slices per optimizer step"),
    ("weight_decay", "0.0001", "L2 coefficient"),
    ("epochs", "50", "training epochs"),
    ("val_fraction", "0.05", "fraction of cases held out for validation"),
    ("train_seed", "0", "seed for initialization, split and shuffling"),
    ("tau_lesion", "0.3", "lesion probability threshold"),
    ("tau_lung", "0.5", "lung probability threshold"),
    ("restrict_to_lung", "true", "keep only lesions inside the predicted lung"),
    ("external_lung_mask", "", "lung mask used for cropping instead of the first pass"),
    ("use_spacing", "false", "report distances in millimetres instead of voxels"),
    ("roc_thresholds", "unique", "`unique` or the number of evenly spaced thresholds"),
    ("phantom_dims", "128x96x12", "phantom grid size"),
    ("phantom_spacing", "2.5x2.5x5", "phantom voxel size in mm"),
    ("phantom_noise_std", "20", "Gaussian HU noise"),
    ("phantom_seed", "7", "dataset seed"),
    ("n_normal", "40", "normal training phantoms (pipeline)"),
    ("n_covid", "40", "diseased training phantoms (pipeline)"),
    ("n_test_normal", "10", "normal held-out phantoms (pipeline)"),
    ("n_test_covid", "10", "diseased held-out phantoms (pipeline)"),
    ("threads", "0", "worker threads, 0 for all cores"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsConfig {
    pub use_spacing: bool,
    pub roc_thresholds: Thresholds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSizes {
    pub n_normal: usize,
    pub n_covid: usize,
    pub n_test_normal: usize,
    pub n_test_covid: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub lesion: LesionConfig,
    pub metrics: MetricsConfig,
    pub phantom: PhantomConfig,
    pub dataset: DatasetSizes,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            lesion: LesionConfig::default(),
            metrics: MetricsConfig {
                use_spacing: false,
                roc_thresholds: Thresholds::Unique,
            },
            phantom: PhantomConfig::default(),
            dataset: DatasetSizes {
                n_normal: 40,
                n_covid: 40,
                n_test_normal: 10,
                n_test_covid: 10,
                seed: 7,
            },
            threads: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_triple<T: std::str::FromStr + Copy + Default>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split('x').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("`{key}`: expected AxBxC, got `{value}`")));
    }
    let mut out = [T::default(); 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse(key, p)?;
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one setting. Relative paths are joined onto `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let v = value.trim();
        match key {
            "hu_min" => self.preprocess.hu_min = parse(key, v)?,
            "hu_max" => self.preprocess.hu_max = parse(key, v)?,
            "target_rows" => self.preprocess.target_rows = parse(key, v)?,
            "target_cols" => self.preprocess.target_cols = parse(key, v)?,
            "crop_margin" => self.preprocess.crop_margin = parse(key, v)?,
            "lr_start" => self.train.lr_start = parse(key, v)?,
            "lr_end" => self.train.lr_end = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "val_fraction" => self.train.val_fraction = parse(key, v)?,
            "train_seed" => self.train.seed = parse(key, v)?,
            "tau_lesion" => self.lesion.tau_lesion = parse(key, v)?,
            "tau_lung" => self.lesion.tau_lung = parse(key, v)?,
            "restrict_to_lung" => self.lesion.restrict_to_lung = parse(key, v)?,
            "external_lung_mask" => {
                self.lesion.external_lung_mask = (!v.is_empty()).then(|| base.join(v));
            }
            "use_spacing" => self.metrics.use_spacing = parse(key, v)?,
            "roc_thresholds" => {
                self.metrics.roc_thresholds = match v {
                    "unique" => Thresholds::Unique,
                    n => Thresholds::Uniform(parse(key, n)?),
                }
            }
            "phantom_dims" => self.phantom.dims = parse_triple(key, v)?,
            "phantom_spacing" => self.phantom.spacing = parse_triple(key, v)?,
            "phantom_noise_std" => self.phantom.noise_std = parse(key, v)?,
            "phantom_seed" => self.dataset.seed = parse(key, v)?,
            "n_normal" => self.dataset.n_normal = parse(key, v)?,
            "n_covid" => self.dataset.n_covid = parse(key, v)?,
            "n_test_normal" => self.dataset.n_test_normal = parse(key, v)?,
            "n_test_covid" => self.dataset.n_test_covid = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text, base)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str, base: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            self.set(k.trim(), v, base)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse_str(&text, &base)
    }

    /// Applies a `key=value` override given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v, Path::new(""))
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.train.validate()?;
        self.lesion.validate()?;
        self.phantom.validate()?;
        if let Thresholds::Uniform(n) = self.metrics.roc_thresholds {
            if n < 2 {
                return Err(Error::Config("roc_thresholds needs at least 2 values".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults_reproduce_default_config() {
        let mut cfg = RunConfig::default();
        for (k, v, _) in KEYS {
            cfg.set(k, v, Path::new("")).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn parses_comments_and_paths() {
        let text = "# comment\nepochs = 12  # trailing\n\ntarget_rows=48\nexternal_lung_mask = m/lung.vhdr\n";
        let cfg = RunConfig::parse_str(text, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.train.epochs, 12);
        assert_eq!(cfg.preprocess.target_rows, 48);
        assert_eq!(cfg.lesion.external_lung_mask, Some(std::path::PathBuf::from("/cfg/m/lung.vhdr")));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            RunConfig::parse_str("epoch = 3", Path::new("")),
            Err(Error::Config(m)) if m.contains("unknown key")
        ));
        assert!(RunConfig::parse_str("epochs = many", Path::new("")).is_err());
        assert!(RunConfig::parse_str("just text", Path::new("")).is_err());
        assert!(RunConfig::parse_str("phantom_dims = 1x2", Path::new("")).is_err());
    }

    #[test]
    fn override_wins() {
        let mut cfg = RunConfig::parse_str("epochs = 3", Path::new("")).unwrap();
        cfg.apply_override("epochs=5").unwrap();
        assert_eq!(cfg.train.epochs, 5);
        cfg.apply_override("roc_thresholds = 101").unwrap();
        assert_eq!(cfg.metrics.roc_thresholds, Thresholds::Uniform(101));
        assert!(cfg.apply_override("epochs").is_err());
    }
}
