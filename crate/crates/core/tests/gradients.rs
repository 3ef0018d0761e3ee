mod common;

use common::*;
use lesionseg::network::Network;
use lesionseg::nn::Tensor4;
use lesionseg::training::batch_gradient;
use rand::Rng;

const TOL: f64 = 1e-4;
const TRIALS: u64 = 12;

fn run(name: &str, check: impl Fn(&mut rand_chacha::ChaCha8Rng) -> f64) {
    for seed in 0..TRIALS {
        let err = check(&mut rng(seed));
        assert!(err < TOL, "{name}: seed {seed} max relative error {err:e}");
    }
}

#[test]
fn conv_dilation_1() {
    run("conv d=1", |r| check_conv(r, 1));
}

#[test]
fn conv_dilation_2() {
    run("conv d=2", |r| check_conv(r, 2));
}

#[test]
fn conv_dilation_4() {
    run("conv d=4", |r| check_conv(r, 4));
}

#[test]
fn instance_norm() {
    run("instance norm", check_instance_norm);
}

#[test]
fn relu() {
    run("relu", check_relu);
}

#[test]
fn residual_add() {
    run("residual add", check_residual_add);
}

#[test]
fn softmax2() {
    run("softmax2", check_softmax2);
}

#[test]
fn dice_loss() {
    run("dice loss", check_dice_loss);
}

/// End-to-end check of the composed f32 network along random directions.
/// The step is small so that few ReLU kinks are crossed.
#[test]
fn whole_network_directional_derivative() {
    let net = Network::new(tiny_arch());
    let mut r = rng(99);
    let params = net.init_params(5);
    let (rows, cols) = (6, 5);
    let x = Tensor4::from_vec([2, 1, rows, cols], (0..2 * rows * cols).map(|_| r.random::<f32>()).collect()).unwrap();
    let y: Vec<f32> = (0..2 * rows * cols).map(|_| f32::from(u8::from(r.random::<bool>()))).collect();
    let (_, grads) = batch_gradient(&net, &params, &x, &y).unwrap();
    for _ in 0..3 {
        let dir: Vec<f32> = (0..params.len()).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let analytic: f64 = grads.iter().zip(&dir).map(|(&g, &d)| f64::from(g) * f64::from(d)).sum();
        let h = 2e-4f32;
        let loss_at = |s: f32| {
            let mut p = params.clone();
            for (v, d) in p.values_mut().iter_mut().zip(&dir) {
                *v += s * d;
            }
            batch_gradient(&net, &p, &x, &y).unwrap().0
        };
        let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * f64::from(h));
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        assert!(rel < 2e-2, "directional derivative {analytic} vs {numeric}");
    }
}
