//! Supervised training of one lung-probability model (normal-anatomy or
//! diseased-anatomy) with the soft Dice loss, Adam, L2 decay and a linearly
//! decaying learning rate.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{ModelParams, Network};
use crate::nn::{Adam, AdamConfig, Scalar, Tensor4};
use crate::preprocess::{extract_training_slices, PreprocessConfig, TrainingSlice};
use crate::volume::{BinaryMask, Volume};

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

/// Which anatomy a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Normal,
    Covid,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Normal => "normal",
            Role::Covid => "covid",
        })
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Role::Normal),
            "covid" => Ok(Role::Covid),
            other => Err(Error::InvalidArgument(format!(
                "unknown role `{other}` (expected normal|covid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub role: Role,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_start: 0.02,
            lr_end: 0.001,
            batch_size: 20,
            weight_decay: 0.0001,
            epochs: 50,
            val_fraction: 0.05,
            seed: 0,
            role: Role::Normal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return Err(Error::InvalidArgument(format!(
                "learning rates must satisfy 0 < lr_end <= lr_start, got {} / {}",
                self.lr_end, self.lr_start
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch_size and epochs must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (highest validation Dice).
    pub best_epoch: usize,
    pub checkpoint: Option<PathBuf>,
    pub validation_cases: Vec<String>,
    /// Every case that contributed a gradient.
    pub gradient_cases: BTreeSet<String>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_loss,val_dice\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_loss, r.val_dice);
        }
        s
    }
}

/// A CT volume with its reference lung mask.
#[derive(Debug, Clone)]
pub struct TrainingCase {
    pub id: String,
    pub ct: Volume,
    pub lung: BinaryMask,
}

/// Soft Dice loss with plain (non-squared) denominator sums:
/// `1 - (2 Σ p g + eps) / (Σ p + Σ g + eps)`, and its gradient in `p`.
pub fn dice_ns_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<(f64, Vec<T>)> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "dice loss on {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in pred.iter().zip(target) {
        let (p, g) = (p.as_f64(), g.as_f64());
        inter += p * g;
        sp += p;
        sg += g;
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sp + sg + DICE_EPS;
    let loss = 1.0 - num / den;
    let den2 = den * den;
    let grad = target
        .iter()
        .map(|&g| T::from_f64(-(2.0 * g.as_f64() * den - num) / den2))
        .collect();
    Ok((loss, grad))
}

/// Linear decay from `lr_start` at epoch 0 to `lr_end` at the last epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr_start;
    }
    let t = epoch.min(cfg.epochs - 1) as f64 / (cfg.epochs - 1) as f64;
    (1.0 - t) * cfg.lr_start + t * cfg.lr_end
}

/// Seeded case-level shuffle; the first `max(1, round(fraction * n))` cases
/// become the validation set.
pub fn split_dataset<T>(cases: Vec<T>, val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = cases.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 cases to split off validation, got {n}"
        )));
    }
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_set: BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (i, c) in cases.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(c);
        } else {
            train.push(c);
        }
    }
    Ok((train, val))
}

fn slices_for(cases: &[&TrainingCase], pre: &PreprocessConfig) -> Result<Vec<TrainingSlice>> {
    let mut out = Vec::new();
    for c in cases {
        out.extend(extract_training_slices(&c.ct, &c.lung, pre, &c.id)?);
    }
    Ok(out)
}

fn stack(slices: &[&TrainingSlice]) -> Result<(Tensor4<f32>, Vec<f32>)> {
    let (rows, cols) = (slices[0].image.image.rows(), slices[0].image.image.cols());
    let mut x = Vec::with_capacity(slices.len() * rows * cols);
    let mut y = Vec::with_capacity(slices.len() * rows * cols);
    for s in slices {
        x.extend_from_slice(s.image.image.data());
        y.extend_from_slice(s.mask.data());
    }
    Ok((Tensor4::from_vec([slices.len(), 1, rows, cols], x)?, y))
}

fn foreground(probs: &Tensor4<f32>) -> Vec<f32> {
    let plane = probs.plane();
    probs
        .data()
        .chunks_exact(2 * plane)
        .flat_map(|s| s[plane..].iter().copied())
        .collect()
}

/// Loss and parameter gradient for one batch.
pub fn batch_gradient(
    network: &Network,
    params: &ModelParams,
    x: &Tensor4<f32>,
    target: &[f32],
) -> Result<(f64, Vec<f32>)> {
    let (probs, cache) = network.forward(params, x, true)?;
    let fg = foreground(&probs);
    let (loss, g_fg) = dice_ns_loss(&fg, target)?;
    let plane = probs.plane();
    let mut grad_probs = Tensor4::zeros(probs.shape());
    for (dst, src) in grad_probs
        .data_mut()
        .chunks_exact_mut(2 * plane)
        .zip(g_fg.chunks_exact(plane))
    {
        dst[plane..].copy_from_slice(src);
    }
    let cache = cache.expect("cache requested");
    let grads = network.backward(params, &cache, &grad_probs)?;
    Ok((loss, grads))
}

fn validate(
    network: &Network,
    params: &ModelParams,
    slices: &[TrainingSlice],
    batch: usize,
) -> Result<(f64, f64)> {
    let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    let (mut hard_inter, mut hard_p, mut hard_g) = (0usize, 0usize, 0usize);
    for chunk in slices.chunks(batch) {
        let refs: Vec<&TrainingSlice> = chunk.iter().collect();
        let (x, y) = stack(&refs)?;
        let (probs, _) = network.forward(params, &x, false)?;
        for (&p, &g) in foreground(&probs).iter().zip(&y) {
            let (p, g) = (f64::from(p), f64::from(g));
            inter += p * g;
            sp += p;
            sg += g;
            let hp = p >= 0.5;
            let hg = g >= 0.5;
            hard_inter += usize::from(hp && hg);
            hard_p += usize::from(hp);
            hard_g += usize::from(hg);
        }
    }
    let loss = 1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS);
    let dice = if hard_p + hard_g == 0 {
        1.0
    } else {
        2.0 * hard_inter as f64 / (hard_p + hard_g) as f64
    };
    Ok((loss, dice))
}

/// Trains one model and returns the parameters of the epoch with the best
/// validation Dice. Fully determined by `cfg.seed`.
pub fn train_model(
    cases: &[TrainingCase],
    cfg: &TrainConfig,
    pre: &PreprocessConfig,
    network: &Network,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    pre.validate()?;
    let (train_cases, val_cases) = split_dataset(cases.iter().collect(), cfg.val_fraction, cfg.seed)?;
    let train = slices_for(&train_cases, pre)?;
    let val = slices_for(&val_cases, pre)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training slices".into()));
    }

    let mut report = TrainReport {
        validation_cases: val_cases.iter().map(|c| c.id.clone()).collect(),
        ..TrainReport::default()
    };
    let mut params = network.init_params(cfg.seed);
    let mut best = (f64::NEG_INFINITY, params.clone());
    let mut adam = Adam::new(
        params.len(),
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingSlice> = idx.iter().map(|&i| &train[i]).collect();
            let (x, y) = stack(&batch)?;
            let (loss, grads) = batch_gradient(network, &params, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} model: loss {loss} at epoch {epoch}, batch {bi}",
                    cfg.role
                )));
            }
            adam.step(params.values_mut(), &grads, lr).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{} model, epoch {epoch}, batch {bi}: {m}", cfg.role)),
                other => other,
            })?;
            for s in &batch {
                if !report.gradient_cases.contains(&s.image.provenance.case_id) {
                    report.gradient_cases.insert(s.image.provenance.case_id.clone());
                }
            }
            loss_sum += loss;
            batches += 1;
        }
        let (val_loss, val_dice) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            validate(network, &params, &val, cfg.batch_size)?
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_dice,
        };
        log::info!(
            "{} epoch {epoch}: lr {lr:.5} train_loss {:.4} val_loss {val_loss:.4} val_dice {val_dice:.4}",
            cfg.role,
            rec.train_loss
        );
        if val_dice > best.0 || (val.is_empty() && epoch + 1 == cfg.epochs) {
            best = (val_dice, params.clone());
            report.best_epoch = epoch;
        }
        report.epochs.push(rec);
    }
    Ok((best.1, report))
}
