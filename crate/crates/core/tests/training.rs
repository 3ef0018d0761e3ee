mod common;

use common::tiny_arch;
use lesionseg::network::Network;
use lesionseg::phantom::{generate_case, PhantomConfig};
use lesionseg::preprocess::PreprocessConfig;
use lesionseg::training::{train_model, Role, TrainConfig, TrainingCase};

fn cases(n: usize, duplicate: bool) -> Vec<TrainingCase> {
    let cfg = PhantomConfig {
        dims: [40, 32, 3],
        ..PhantomConfig::default()
    };
    (0..n)
        .map(|i| {
            let seed = if duplicate { 0 } else { i as u64 };
            let c = generate_case(&cfg, Role::Normal, seed).unwrap();
            TrainingCase {
                id: format!("case{i}"),
                ct: c.ct,
                lung: c.lung_mask,
            }
        })
        .collect()
}

fn setup(epochs: usize) -> (TrainConfig, PreprocessConfig, Network) {
    let train = TrainConfig {
        epochs,
        batch_size: 3,
        val_fraction: 0.3,
        seed: 4,
        lr_start: 0.01,
        lr_end: 0.001,
        ..TrainConfig::default()
    };
    let pre = PreprocessConfig {
        target_rows: 12,
        target_cols: 16,
        ..PreprocessConfig::default()
    };
    (train, pre, Network::new(tiny_arch()))
}

#[test]
fn loss_decreases_on_a_duplicated_case() {
    let (cfg, pre, net) = setup(5);
    let (_, report) = train_model(&cases(4, true), &cfg, &pre, &net).unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn training_is_reproducible() {
    let (cfg, pre, net) = setup(2);
    let data = cases(4, false);
    let (a, ra) = train_model(&data, &cfg, &pre, &net).unwrap();
    let (b, rb) = train_model(&data, &cfg, &pre, &net).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn validation_cases_never_contribute_gradients() {
    let (cfg, pre, net) = setup(1);
    let (_, report) = train_model(&cases(5, false), &cfg, &pre, &net).unwrap();
    assert!(!report.validation_cases.is_empty());
    for v in &report.validation_cases {
        assert!(!report.gradient_cases.contains(v));
    }
    assert_eq!(report.gradient_cases.len() + report.validation_cases.len(), 5);
    assert!(report.best_epoch < report.epochs.len());
}

#[test]
fn single_case_cannot_be_split() {
    let (cfg, pre, net) = setup(1);
    assert!(train_model(&cases(1, false), &cfg, &pre, &net).is_err());
}
