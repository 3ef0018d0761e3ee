//! Independent oracles shared by the integration tests and the acceptance
//! gate: central finite differences for every differentiable op and
//! exhaustive voxel-loop versions of the metrics.
#![allow(dead_code)]

use lesionseg::network::{ArchitectureSpec, Stage};
use lesionseg::nn::{
    conv2d_backward, conv2d_forward, instance_norm_backward, instance_norm_forward, relu_backward, relu_forward,
    residual_add_backward, residual_add_forward, softmax2_backward, softmax2_forward, ConvSpec, Tensor4,
};
use lesionseg::training::dice_ns_loss;
use lesionseg::volume::{BinaryMask, Geometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, random_vec(rng, n, -1.0, 1.0)).unwrap()
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, 1e-6)` over the pair.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conv with random input, weight and bias; checks all three gradients.
pub fn check_conv(rng: &mut ChaCha8Rng, dilation: usize) -> f64 {
    let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
    let shape = [rng.random_range(1..3), cin, rng.random_range(3..7), rng.random_range(3..7)];
    let spec = ConvSpec::new(cin, cout, 3, dilation);
    let x = random_tensor(rng, shape);
    let w = random_vec(rng, spec.weight_len(), -1.0, 1.0);
    let b = random_vec(rng, cout, -1.0, 1.0);
    let out_shape = [shape[0], cout, shape[2], shape[3]];
    let up = random_tensor(rng, out_shape);
    let loss = |x: &Tensor4<f64>, w: &[f64], b: &[f64]| {
        dot(conv2d_forward(x, w, Some(b), &spec).unwrap().data(), up.data())
    };
    let g = conv2d_backward(&x, &w, &up, &spec).unwrap();
    let gx = fd_gradient(|v| loss(&Tensor4::from_vec(shape, v.to_vec()).unwrap(), &w, &b), x.data());
    let gw = fd_gradient(|v| loss(&x, v, &b), &w);
    let gb = fd_gradient(|v| loss(&x, &w, v), &b);
    max_rel_err(g.input.data(), &gx)
        .max(max_rel_err(&g.weight, &gw))
        .max(max_rel_err(&g.bias, &gb))
}

pub fn check_instance_norm(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..4);
    let shape = [rng.random_range(1..3), c, rng.random_range(2..6), rng.random_range(2..6)];
    let x = random_tensor(rng, shape);
    let scale = random_vec(rng, c, 0.5, 1.5);
    let shift = random_vec(rng, c, -0.5, 0.5);
    let up = random_tensor(rng, shape);
    let loss = |x: &Tensor4<f64>, s: &[f64], t: &[f64]| dot(instance_norm_forward(x, s, t).unwrap().0.data(), up.data());
    let (_, cache) = instance_norm_forward(&x, &scale, &shift).unwrap();
    let g = instance_norm_backward(&cache, &scale, &up).unwrap();
    let gx = fd_gradient(|v| loss(&Tensor4::from_vec(shape, v.to_vec()).unwrap(), &scale, &shift), x.data());
    let gs = fd_gradient(|v| loss(&x, v, &shift), &scale);
    let gt = fd_gradient(|v| loss(&x, &scale, v), &shift);
    max_rel_err(g.input.data(), &gx)
        .max(max_rel_err(&g.scale, &gs))
        .max(max_rel_err(&g.shift, &gt))
}

fn small_shape(rng: &mut ChaCha8Rng, channels: usize) -> [usize; 4] {
    [rng.random_range(1..3), channels, rng.random_range(2..5), rng.random_range(2..5)]
}

/// Inputs are kept at least 0.05 away from the kink.
pub fn check_relu(rng: &mut ChaCha8Rng) -> f64 {
    let shape = small_shape(rng, 2);
    let n = shape.iter().product();
    let x: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Tensor4::from_vec(shape, x).unwrap();
    let up = random_tensor(rng, shape);
    let g = relu_backward(&x, &up).unwrap();
    let gx = fd_gradient(
        |v| dot(relu_forward(&Tensor4::from_vec(shape, v.to_vec()).unwrap()).data(), up.data()),
        x.data(),
    );
    max_rel_err(g.data(), &gx)
}

pub fn check_residual_add(rng: &mut ChaCha8Rng) -> f64 {
    let shape = small_shape(rng, 3);
    let a = random_tensor(rng, shape);
    let b = random_tensor(rng, shape);
    let up = random_tensor(rng, shape);
    let loss = |a: &Tensor4<f64>, b: &Tensor4<f64>| dot(residual_add_forward(a, b).unwrap().data(), up.data());
    let (ga, gb) = residual_add_backward(&up);
    let na = fd_gradient(|v| loss(&Tensor4::from_vec(shape, v.to_vec()).unwrap(), &b), a.data());
    let nb = fd_gradient(|v| loss(&a, &Tensor4::from_vec(shape, v.to_vec()).unwrap()), b.data());
    max_rel_err(ga.data(), &na).max(max_rel_err(gb.data(), &nb))
}

pub fn check_softmax2(rng: &mut ChaCha8Rng) -> f64 {
    let shape = small_shape(rng, 2);
    let z = random_tensor(rng, shape).map(|v| 3.0 * v);
    let up = random_tensor(rng, shape);
    let p = softmax2_forward(&z).unwrap();
    let g = softmax2_backward(&p, &up).unwrap();
    let gz = fd_gradient(
        |v| dot(softmax2_forward(&Tensor4::from_vec(shape, v.to_vec()).unwrap()).unwrap().data(), up.data()),
        z.data(),
    );
    max_rel_err(g.data(), &gz)
}

pub fn check_dice_loss(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(4..40);
    let p = random_vec(rng, n, 0.01, 0.99);
    let t: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let (_, g) = dice_ns_loss(&p, &t).unwrap();
    let gp = fd_gradient(|v| dice_ns_loss(v, &t).unwrap().0, &p);
    max_rel_err(&g, &gp)
}

/// A two-stage network small enough for exhaustive tests.
pub fn tiny_arch() -> ArchitectureSpec {
    ArchitectureSpec {
        in_channels: 1,
        stem_channels: 4,
        stages: vec![
            Stage {
                dilation: 1,
                channels: 4,
                blocks: 1,
            },
            Stage {
                dilation: 2,
                channels: 6,
                blocks: 1,
            },
        ],
        classes: 2,
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], p: f64) -> BinaryMask {
    let g = Geometry::with_dims(dims).unwrap();
    let n = g.len();
    BinaryMask::new(g, (0..n).map(|_| rng.random_bool(p)).collect()).unwrap()
}

fn coords(m: &BinaryMask) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = m.geometry().dims();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.get(x, y, z) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// (|R∩P|, |R|, |P|) by nested loops over coordinates.
pub fn oracle_counts(r: &BinaryMask, p: &BinaryMask) -> (usize, usize, usize) {
    let [nx, ny, nz] = r.geometry().dims();
    let (mut i, mut a, mut b) = (0, 0, 0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (u, v) = (r.get(x, y, z), p.get(x, y, z));
                i += usize::from(u && v);
                a += usize::from(u);
                b += usize::from(v);
            }
        }
    }
    (i, a, b)
}

pub fn oracle_dice(r: &BinaryMask, p: &BinaryMask) -> f64 {
    let (i, a, b) = oracle_counts(r, p);
    if a + b == 0 {
        1.0
    } else {
        2.0 * i as f64 / (a + b) as f64
    }
}

pub fn oracle_jaccard(r: &BinaryMask, p: &BinaryMask) -> f64 {
    let (i, a, b) = oracle_counts(r, p);
    if a + b == 0 {
        1.0
    } else {
        i as f64 / (a + b - i) as f64
    }
}

/// (tp, fp, tn, fn) over the whole grid.
pub fn oracle_confusion(r: &BinaryMask, p: &BinaryMask) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&u, &v) in r.voxels().iter().zip(p.voxels()) {
        match (u, v) {
            (true, true) => c.0 += 1,
            (false, true) => c.1 += 1,
            (false, false) => c.2 += 1,
            (true, false) => c.3 += 1,
        }
    }
    c
}

pub fn oracle_surface(m: &BinaryMask) -> Vec<[usize; 3]> {
    let d = m.geometry().dims();
    coords(m)
        .into_iter()
        .filter(|c| {
            (0..3).any(|a| c[a] == 0 || c[a] + 1 == d[a])
                || (0..3).any(|a| {
                    let mut lo = *c;
                    lo[a] -= 1;
                    let mut hi = *c;
                    hi[a] += 1;
                    !m.get(lo[0], lo[1], lo[2]) || !m.get(hi[0], hi[1], hi[2])
                })
        })
        .collect()
}

fn mean_nearest(from: &[[usize; 3]], to: &[[usize; 3]], step: [f64; 3]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    (0..3)
                        .map(|k| ((a[k] as f64 - b[k] as f64) * step[k]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / from.len() as f64
}

/// (mean surface distance, average Hausdorff) by all-pairs search.
pub fn oracle_surface_distances(r: &BinaryMask, p: &BinaryMask, step: [f64; 3]) -> (f64, f64) {
    let (sr, sp) = (oracle_surface(r), oracle_surface(p));
    let (ar, ap) = (coords(r), coords(p));
    (
        0.5 * (mean_nearest(&sp, &sr, step) + mean_nearest(&sr, &sp, step)),
        0.5 * (mean_nearest(&ap, &ar, step) + mean_nearest(&ar, &ap, step)),
    )
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn oracle_auc(samples: &[(f32, bool)]) -> f64 {
    let pos: Vec<f32> = samples.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f32> = samples.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}
