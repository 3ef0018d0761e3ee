use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lesionseg::config::{RunConfig, KEYS};
use lesionseg::metrics::{EvalMode, Thresholds};
use lesionseg::par;
use lesionseg::phantom::generate_dataset;
use lesionseg::pipeline::{self, case_id_from_path};
use lesionseg::training::Role;
use lesionseg::volume::{read_typed, Volume};
use lesionseg::Error;

/// Unsupervised lesion segmentation on chest CT from two lung models.
#[derive(Parser, Debug)]
#[command(version, about, after_help = keys_help())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom {
        #[arg(long)]
        normal: Option<usize>,
        #[arg(long)]
        covid: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the normal-anatomy or diseased-anatomy lung model.
    Train {
        #[arg(long)]
        role: Role,
        #[arg(long)]
        data: PathBuf,
        /// Weight manifest to write; the blob goes next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Lesion (or lung-only) inference on one CT or a whole dataset.
    Infer {
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        ct: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "lung_model")]
        covid_model: Option<PathBuf>,
        #[arg(long, required_unless_present = "lung_model")]
        norm_model: Option<PathBuf>,
        /// Only predict lung masks with this model.
        #[arg(long, conflicts_with_all = ["covid_model", "norm_model"])]
        lung_model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau_lesion: Option<f64>,
        #[arg(long)]
        tau_lung: Option<f64>,
        /// Lung mask used for cropping instead of the first pass.
        #[arg(long)]
        lung_mask: Option<PathBuf>,
        /// Keep lesion voxels outside the predicted lung.
        #[arg(long)]
        unrestricted: bool,
        /// Only process cases with this label (with --data).
        #[arg(long)]
        label: Option<Role>,
    },
    /// Per-case metrics with mean and SD footer rows.
    Eval {
        #[arg(long)]
        mode: EvalMode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label: Option<Role>,
        /// Report distances in millimetres.
        #[arg(long)]
        mm: bool,
    },
    /// Pooled ROC curve of the lesion probability maps.
    Roc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label: Option<Role>,
        /// Evenly spaced thresholds instead of every distinct score.
        #[arg(long)]
        thresholds: Option<usize>,
    },
    /// Phantoms, both models, inference, evaluation and ROC in one run.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

fn keys_help() -> String {
    let mut s = String::from("Configuration keys (default):\n");
    for (k, v, doc) in KEYS {
        s.push_str(&format!("  {k:<20} {v:<12} {doc}\n"));
    }
    s
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command, mut cfg: RunConfig) -> Result<()> {
    match command {
        Command::Phantom {
            normal,
            covid,
            seed,
            out,
        } => {
            let d = &mut cfg.dataset;
            let (n, c, s) = (normal.unwrap_or(d.n_normal), covid.unwrap_or(d.n_covid), seed.unwrap_or(d.seed));
            cfg.phantom.validate()?;
            let entries = generate_dataset(&cfg.phantom, n, c, s, &out)?;
            println!("wrote {} cases to {}", entries.len(), out.display());
        }
        Command::Train {
            role,
            data,
            out,
            epochs,
            seed,
        } => {
            cfg.train.role = role;
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            cfg.validate()?;
            let report = pipeline::train_from_dir(&data, &cfg, &out)?;
            let best = &report.epochs[report.best_epoch];
            println!(
                "{role} model: best epoch {} (val dice {:.4}), weights {}",
                best.epoch,
                best.val_dice,
                out.display()
            );
        }
        Command::Infer {
            ct,
            data,
            covid_model,
            norm_model,
            lung_model,
            out,
            tau_lesion,
            tau_lung,
            lung_mask,
            unrestricted,
            label,
        } => {
            cfg.lesion.tau_lesion = tau_lesion.unwrap_or(cfg.lesion.tau_lesion);
            cfg.lesion.tau_lung = tau_lung.unwrap_or(cfg.lesion.tau_lung);
            if lung_mask.is_some() {
                cfg.lesion.external_lung_mask = lung_mask;
            }
            if unrestricted {
                cfg.lesion.restrict_to_lung = false;
            }
            cfg.validate()?;
            let net = pipeline::network();
            if let Some(model) = lung_model {
                let params = pipeline::load_model(&model, &net)?;
                let Some(data) = data else {
                    bail!(Error::InvalidArgument("--lung-model needs --data".into()));
                };
                let ids = pipeline::predict_lung_dir(&data, &params, &cfg, &out, label)?;
                println!("wrote lung masks for {} cases to {}", ids.len(), out.display());
                return Ok(());
            }
            let (Some(cm), Some(nm)) = (covid_model, norm_model) else {
                bail!(Error::InvalidArgument("--covid-model and --norm-model are required".into()));
            };
            let covid = pipeline::load_model(&cm, &net)?;
            let norm = pipeline::load_model(&nm, &net)?;
            match (ct, data) {
                (Some(ct_path), _) => {
                    let ct: Volume = read_typed(&ct_path)?;
                    let id = case_id_from_path(&ct_path);
                    let r = pipeline::infer_case(&ct, &id, &net, &covid, &norm, &cfg, &out)?;
                    println!("{id}: {} lesion voxels, {} lung voxels", r.lesion_mask.count(), r.lung_mask.count());
                }
                (None, Some(data)) => {
                    let ids = pipeline::infer_dir(&data, &covid, &norm, &cfg, &out, label)?;
                    println!("inferred {} cases into {}", ids.len(), out.display());
                }
                (None, None) => bail!(Error::InvalidArgument("one of --ct or --data is required".into())),
            }
        }
        Command::Eval {
            mode,
            data,
            pred,
            out,
            label,
            mm,
        } => {
            let table = pipeline::evaluate_dir(&data, &pred, mode, label, mm || cfg.metrics.use_spacing)?;
            write(&out, &table.to_csv())?;
            for c in table.aggregate() {
                match (c.mean, c.sd) {
                    (Some(m), Some(sd)) => println!("{:<28} {m:.4} ± {sd:.4} (n={})", c.name, c.count),
                    _ => println!("{:<28} missing", c.name),
                }
            }
        }
        Command::Roc {
            data,
            pred,
            out,
            label,
            thresholds,
        } => {
            let t = thresholds.map_or(cfg.metrics.roc_thresholds, Thresholds::Uniform);
            let curve = pipeline::roc_dir(&data, &pred, label, t)?;
            write(&out, &curve.to_csv())?;
            println!("AUC {:.4}", curve.auc);
        }
        Command::Pipeline { out } => {
            let summary = pipeline::run_pipeline(&cfg, &out)?;
            print!("{}", summary.to_csv());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = load_config(&cli.common).and_then(|cfg| {
        let threads = cfg.threads;
        par::with_threads(threads, || run(cli.command, cfg))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
