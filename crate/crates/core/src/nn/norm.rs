//! Instance normalization: each (sample, channel) plane is standardized over
//! its spatial extent, then scaled and shifted by per-channel parameters.
//! Statistics are accumulated in `f64`.

use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};
use crate::par;

pub const NORM_EPS: f64 = 1e-5;

/// Saved state for [`instance_norm_backward`].
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    /// Standardized input, before scale and shift.
    pub normalized: Tensor4<T>,
    /// `1 / sqrt(var + eps)` per (sample, channel).
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NormGrads<T> {
    pub input: Tensor4<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

fn check_params<T: Scalar>(x: &Tensor4<T>, scale: &[T], shift: &[T]) -> Result<()> {
    if scale.len() != x.channels() || shift.len() != x.channels() {
        return Err(Error::ShapeMismatch(format!(
            "instance norm over {} channels given {} scales / {} shifts",
            x.channels(),
            scale.len(),
            shift.len()
        )));
    }
    Ok(())
}

pub fn instance_norm_forward<T: Scalar>(
    x: &Tensor4<T>,
    scale: &[T],
    shift: &[T],
) -> Result<(Tensor4<T>, NormCache<T>)> {
    check_params(x, scale, shift)?;
    let [batch, channels, _, _] = x.shape();
    let plane = x.plane();
    let per_sample = par::map_indexed(batch, |b| {
        let s = x.sample(b);
        let mut out = vec![T::zero(); s.len()];
        let mut normalized = vec![T::zero(); s.len()];
        let mut inv = Vec::with_capacity(channels);
        for c in 0..channels {
            let src = &s[c * plane..(c + 1) * plane];
            let n = plane as f64;
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = src
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let inv_std = 1.0 / (var + NORM_EPS).sqrt();
            inv.push(inv_std);
            let (g, h) = (scale[c].as_f64(), shift[c].as_f64());
            for ((o, nrm), &v) in out[c * plane..(c + 1) * plane]
                .iter_mut()
                .zip(&mut normalized[c * plane..(c + 1) * plane])
                .zip(src)
            {
                let xh = (v.as_f64() - mean) * inv_std;
                *nrm = T::from_f64(xh);
                *o = T::from_f64(g * xh + h);
            }
        }
        (out, normalized, inv)
    });
    let shape = x.shape();
    let mut outs = Vec::with_capacity(batch);
    let mut norms = Vec::with_capacity(batch);
    let mut inv_std = Vec::with_capacity(batch * channels);
    for (o, n, i) in per_sample {
        outs.push(o);
        norms.push(n);
        inv_std.extend(i);
    }
    Ok((
        Tensor4::from_samples(shape, outs),
        NormCache {
            normalized: Tensor4::from_samples(shape, norms),
            inv_std,
        },
    ))
}

pub fn instance_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    scale: &[T],
    grad_out: &Tensor4<T>,
) -> Result<NormGrads<T>> {
    let xhat = &cache.normalized;
    xhat.ensure_shape(grad_out, "instance norm backward")?;
    if scale.len() != xhat.channels() {
        return Err(Error::ShapeMismatch("instance norm scale length".into()));
    }
    let [batch, channels, _, _] = xhat.shape();
    let plane = xhat.plane();
    let n = plane as f64;
    let per_sample = par::map_indexed(batch, |b| {
        let xs = xhat.sample(b);
        let gs = grad_out.sample(b);
        let mut gx = vec![T::zero(); xs.len()];
        let mut gscale = vec![0.0f64; channels];
        let mut gshift = vec![0.0f64; channels];
        for c in 0..channels {
            let r = c * plane..(c + 1) * plane;
            let (xc, gc) = (&xs[r.clone()], &gs[r.clone()]);
            let sum_g: f64 = gc.iter().map(|v| v.as_f64()).sum();
            let sum_gx: f64 = gc.iter().zip(xc).map(|(g, x)| g.as_f64() * x.as_f64()).sum();
            gscale[c] = sum_gx;
            gshift[c] = sum_g;
            let k = scale[c].as_f64() * cache.inv_std[b * channels + c] / n;
            for ((o, g), x) in gx[r].iter_mut().zip(gc).zip(xc) {
                *o = T::from_f64(k * (n * g.as_f64() - sum_g - x.as_f64() * sum_gx));
            }
        }
        (gx, gscale, gshift)
    });
    let mut inputs = Vec::with_capacity(batch);
    let mut gscale = vec![0.0f64; channels];
    let mut gshift = vec![0.0f64; channels];
    for (gx, gs, gh) in per_sample {
        inputs.push(gx);
        gscale.iter_mut().zip(gs).for_each(|(a, v)| *a += v);
        gshift.iter_mut().zip(gh).for_each(|(a, v)| *a += v);
    }
    Ok(NormGrads {
        input: Tensor4::from_samples(xhat.shape(), inputs),
        scale: gscale.into_iter().map(T::from_f64).collect(),
        shift: gshift.into_iter().map(T::from_f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_is_standardized() {
        let x = Tensor4::from_vec([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]).unwrap();
        let (y, cache) = instance_norm_forward(&x, &[1.0, 1.0], &[0.0, 0.5]).unwrap();
        let ch0 = &y.data()[..4];
        let mean: f64 = ch0.iter().sum::<f64>() / 4.0;
        let var: f64 = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + NORM_EPS)).abs() < 1e-12);
        // A constant plane collapses onto the shift.
        assert!(y.data()[4..].iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert_eq!(cache.inv_std.len(), 2);
    }

    #[test]
    fn rejects_wrong_param_count() {
        let x = Tensor4::<f32>::zeros([1, 3, 2, 2]);
        assert!(instance_norm_forward(&x, &[1.0; 2], &[0.0; 3]).is_err());
    }
}
