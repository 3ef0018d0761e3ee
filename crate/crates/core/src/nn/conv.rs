//! 2D cross-correlation with dilation and zero "same" padding, lowered to
//! GEMM through an im2col buffer.

use super::tensor::{matmul, Scalar, Tensor4};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(rows, cols)`; both must be odd.
    pub kernel: (usize, usize),
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            dilation,
        }
    }

    /// Zero padding per side; `dilation * (k - 1) / 2` keeps spatial dims.
    pub fn padding(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel.0 - 1) / 2,
            self.dilation * (self.kernel.1 - 1) / 2,
        )
    }

    /// Length of one im2col column: `in_channels * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    /// Weight tensor shape `(out, in, kh, kw)`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1)
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.0.is_multiple_of(2) || self.kernel.1.is_multiple_of(2) || self.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv needs odd kernels and dilation >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    fn check<T: Scalar>(&self, x: &Tensor4<T>, weight: &[T], bias: Option<&[T]>) -> Result<()> {
        self.validate()?;
        if x.channels() != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        if weight.len() != self.weight_len() {
            return Err(Error::ShapeMismatch(format!(
                "conv weight has {} values, expected {}",
                weight.len(),
                self.weight_len()
            )));
        }
        if let Some(b) = bias {
            if b.len() != self.out_channels {
                return Err(Error::ShapeMismatch(format!(
                    "conv bias has {} values, expected {}",
                    b.len(),
                    self.out_channels
                )));
            }
        }
        Ok(())
    }
}

fn im2col<T: Scalar>(input: &[T], rows: usize, cols: usize, spec: &ConvSpec, col: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (ph, pw) = spec.padding();
    let d = spec.dilation;
    let plane = rows * cols;
    for c in 0..spec.in_channels {
        let src = &input[c * plane..(c + 1) * plane];
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = (i * d) as isize - ph as isize;
                let dx = (j * d) as isize - pw as isize;
                // Output columns whose source column lies inside the image.
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((cols as isize - dx).min(cols as isize)).max(0) as usize;
                for y in 0..rows {
                    let out = &mut dst[y * cols..(y + 1) * cols];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= rows as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * cols..(sy as usize + 1) * cols];
                    out[..x_lo].fill(T::zero());
                    out[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&srow[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], rows: usize, cols: usize, spec: &ConvSpec, grad: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (ph, pw) = spec.padding();
    let d = spec.dilation;
    let plane = rows * cols;
    for c in 0..spec.in_channels {
        let dst = &mut grad[c * plane..(c + 1) * plane];
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                let dy = (i * d) as isize - ph as isize;
                let dx = (j * d) as isize - pw as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((cols as isize - dx).min(cols as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..rows {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= rows as isize {
                        continue;
                    }
                    let g = &src[y * cols + x_lo..y * cols + x_hi];
                    let s0 = sy as usize * cols + (x_lo as isize + dx) as usize;
                    for (o, &v) in dst[s0..s0 + g.len()].iter_mut().zip(g) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
}

/// Dilated convolution. `weight` is `(out, in, kh, kw)` row-major.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    spec.check(x, weight, bias)?;
    let [batch, _, rows, cols] = x.shape();
    let plane = rows * cols;
    let k = spec.patch_len();
    let cout = spec.out_channels;
    let samples = par::map_indexed(batch, |b| {
        let mut out = vec![T::zero(); cout * plane];
        if spec.is_pointwise() {
            matmul(cout, k, plane, weight, false, x.sample(b), false, T::zero(), &mut out);
        } else {
            let mut col = vec![T::zero(); k * plane];
            im2col(x.sample(b), rows, cols, spec, &mut col);
            matmul(cout, k, plane, weight, false, &col, false, T::zero(), &mut out);
        }
        if let Some(bias) = bias {
            for (o, &bv) in out.chunks_exact_mut(plane).zip(bias) {
                o.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        out
    });
    Ok(Tensor4::from_samples([batch, cout, rows, cols], samples))
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Adjoint of [`conv2d_forward`] for upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    grad_out: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    spec.check(x, weight, None)?;
    let [batch, _, rows, cols] = x.shape();
    if grad_out.shape() != [batch, spec.out_channels, rows, cols] {
        return Err(Error::ShapeMismatch(format!(
            "conv upstream gradient {:?} for input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let plane = rows * cols;
    let k = spec.patch_len();
    let cout = spec.out_channels;
    let per_sample = par::map_indexed(batch, |b| {
        let g = grad_out.sample(b);
        let mut gw = vec![T::zero(); cout * k];
        let mut gx = vec![T::zero(); spec.in_channels * plane];
        if spec.is_pointwise() {
            matmul(cout, plane, k, g, false, x.sample(b), true, T::zero(), &mut gw);
            matmul(k, cout, plane, weight, true, g, false, T::zero(), &mut gx);
        } else {
            let mut col = vec![T::zero(); k * plane];
            im2col(x.sample(b), rows, cols, spec, &mut col);
            matmul(cout, plane, k, g, false, &col, true, T::zero(), &mut gw);
            matmul(k, cout, plane, weight, true, g, false, T::zero(), &mut col);
            col2im(&col, rows, cols, spec, &mut gx);
        }
        let gb: Vec<f64> = g
            .chunks_exact(plane)
            .map(|c| c.iter().map(|v| v.as_f64()).sum())
            .collect();
        (gx, gw, gb)
    });

    let mut weight_grad = vec![T::zero(); cout * k];
    let mut bias_acc = vec![0.0f64; cout];
    let mut inputs = Vec::with_capacity(batch);
    for (gx, gw, gb) in per_sample {
        for (a, v) in weight_grad.iter_mut().zip(gw) {
            *a = *a + v;
        }
        for (a, v) in bias_acc.iter_mut().zip(gb) {
            *a += v;
        }
        inputs.push(gx);
    }
    Ok(ConvGrads {
        input: Tensor4::from_samples(x.shape(), inputs),
        weight: weight_grad,
        bias: bias_acc.into_iter().map(T::from_f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive(x: &Tensor4<f64>, w: &[f64], bias: &[f64], spec: &ConvSpec) -> Tensor4<f64> {
        let [b, cin, h, wd] = x.shape();
        let (kh, kw) = spec.kernel;
        let (ph, pw) = spec.padding();
        let d = spec.dilation as isize;
        let mut out = Tensor4::zeros([b, spec.out_channels, h, wd]);
        for n in 0..b {
            for o in 0..spec.out_channels {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = bias[o];
                        for c in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let sy = y as isize + i as isize * d - ph as isize;
                                    let sx = xx as isize + j as isize * d - pw as isize;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * cin + c) * h + sy as usize) * wd + sx as usize];
                                    acc += w[((o * cin + c) * kh + i) * kw + j] * xv;
                                }
                            }
                        }
                        out.data_mut()[((n * spec.out_channels + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn pointwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::from_vec([2, 3, 4, 5], random(&mut rng, 120)).unwrap();
        let spec = ConvSpec::new(3, 3, 1, 1);
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::from_vec([1, 2, 5, 5], random(&mut rng, 50)).unwrap();
        let spec = ConvSpec::new(2, 4, 3, 2);
        let y = conv2d_forward(&x, &vec![0.0; spec.weight_len()], None, &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), [1, 4, 5, 5]);
    }

    #[test]
    fn matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(d, h, w) in &[(1, 5, 5), (2, 5, 5), (4, 6, 7), (2, 3, 9)] {
            let spec = ConvSpec::new(2, 3, 3, d);
            let x = Tensor4::from_vec([2, 2, h, w], random(&mut rng, 4 * h * w)).unwrap();
            let wt = random(&mut rng, spec.weight_len());
            let bias = random(&mut rng, 3);
            let fast = conv2d_forward(&x, &wt, Some(&bias), &spec).unwrap();
            let slow = naive(&x, &wt, &bias, &spec);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "d={d}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_preserved_for_all_dilations() {
        for d in [1, 2, 4, 8] {
            let spec = ConvSpec::new(1, 1, 3, d);
            let x = Tensor4::<f32>::zeros([1, 1, 6, 4]);
            let y = conv2d_forward(&x, &[0.0; 9], None, &spec).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let spec = ConvSpec::new(2, 1, 3, 1);
        let x = Tensor4::<f64>::zeros([1, 3, 4, 4]);
        assert!(matches!(
            conv2d_forward(&x, &[0.0; 18], None, &spec),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::new(2, 2, 3, 1);
        let x = Tensor4::from_vec([1, 2, 4, 4], random(&mut rng, 32)).unwrap();
        let w = random(&mut rng, spec.weight_len());
        let g = conv2d_backward(&x, &w, &Tensor4::zeros([1, 2, 4, 4]), &spec).unwrap();
        assert!(g.input.data().iter().chain(&g.weight).chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::new(2, 3, 3, 2);
        let x = Tensor4::from_vec([2, 2, 5, 5], random(&mut rng, 100)).unwrap();
        let w = random(&mut rng, spec.weight_len());
        let g = Tensor4::from_vec([2, 3, 5, 5], random(&mut rng, 150)).unwrap();
        let alpha = 2.5;
        let a = conv2d_backward(&x, &w, &g, &spec).unwrap();
        let b = conv2d_backward(&x, &w, &g.map(|v| v * alpha), &spec).unwrap();
        let close = |p: &[f64], q: &[f64]| p.iter().zip(q).all(|(u, v)| (u * alpha - v).abs() < 1e-12);
        assert!(close(a.input.data(), b.input.data()));
        assert!(close(&a.weight, &b.weight));
        assert!(close(&a.bias, &b.bias));
    }
}
