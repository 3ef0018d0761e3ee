//! Pointwise nonlinearity, residual addition and the two-class softmax head.

use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    x.ensure_shape(grad_out, "relu backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(x.shape(), data)
}

pub fn residual_add_forward<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    a.ensure_shape(b, "residual add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor4::from_vec(a.shape(), data)
}

/// Both branches receive the upstream gradient unchanged.
pub fn residual_add_backward<T: Scalar>(grad_out: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    (grad_out.clone(), grad_out.clone())
}

fn check_two_classes<T: Scalar>(x: &Tensor4<T>) -> Result<()> {
    if x.channels() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "softmax2 needs 2 channels, got {}",
            x.channels()
        )));
    }
    Ok(())
}

/// Softmax across the class axis of a `(batch, 2, rows, cols)` logit tensor.
pub fn softmax2_forward<T: Scalar>(logits: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_two_classes(logits)?;
    let plane = logits.plane();
    let mut out = Tensor4::zeros(logits.shape());
    for (src, dst) in logits
        .data()
        .chunks_exact(2 * plane)
        .zip(out.data_mut().chunks_exact_mut(2 * plane))
    {
        let (z0, z1) = src.split_at(plane);
        let (p0, p1) = dst.split_at_mut(plane);
        for i in 0..plane {
            // p1 = sigmoid(z1 - z0), computed on the stable side.
            let d = z1[i].as_f64() - z0[i].as_f64();
            let q = if d >= 0.0 {
                1.0 / (1.0 + (-d).exp())
            } else {
                let e = d.exp();
                e / (1.0 + e)
            };
            p1[i] = T::from_f64(q);
            p0[i] = T::from_f64(1.0 - q);
        }
    }
    Ok(out)
}

/// Gradient of the logits given softmax outputs `probs` and upstream `grad_out`.
pub fn softmax2_backward<T: Scalar>(probs: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_two_classes(probs)?;
    probs.ensure_shape(grad_out, "softmax2 backward")?;
    let plane = probs.plane();
    let mut out = Tensor4::zeros(probs.shape());
    for ((p, g), o) in probs
        .data()
        .chunks_exact(2 * plane)
        .zip(grad_out.data().chunks_exact(2 * plane))
        .zip(out.data_mut().chunks_exact_mut(2 * plane))
    {
        for i in 0..plane {
            let (p0, p1) = (p[i].as_f64(), p[plane + i].as_f64());
            let (g0, g1) = (g[i].as_f64(), g[plane + i].as_f64());
            // dz_k = p_k (g_k - sum_j g_j p_j); for two classes both reduce to
            // ±p0 p1 (g1 - g0).
            let t = p0 * p1 * (g1 - g0);
            o[i] = T::from_f64(-t);
            o[plane + i] = T::from_f64(t);
        }
    }
    Ok(out)
}
