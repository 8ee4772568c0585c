//! Nonlinearities and normalizations, value level. The tape wraps these.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Slope of the sigmoid inside the GELU approximation.
pub const GELU_SLOPE: f64 = 1.702;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x ⊙ sigmoid(1.702 x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = T::of(GELU_SLOPE);
    x.map(|v| v * sigmoid(k * v))
}

pub(crate) fn gelu_grad<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let k = T::of(GELU_SLOPE);
    x.zip_map(dy, |v, g| {
        let s = sigmoid(k * v);
        g * (s + k * v * s * (T::one() - s))
    })
    .expect("gelu grad shapes")
}

/// Row-wise softmax restricted to `allowed[row]`; every other entry is 0.
///
/// The maximum is taken over the allowed entries only.
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, allowed: &[Vec<usize>]) -> Result<Tensor<T>> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if allowed.len() != rows {
        return Err(shape_err(
            "masked_softmax",
            format!("{} allowed rows for {rows} logit rows", allowed.len()),
        ));
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    for (i, set) in allowed.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::EmptyAllowedRow { row: i });
        }
        if let Some(&j) = set.iter().find(|&&j| j >= cols) {
            return Err(shape_err(
                "masked_softmax",
                format!("allowed index {j} >= {cols} columns"),
            ));
        }
        let src = logits.row(i);
        let m = set.iter().map(|&j| src[j]).fold(T::neg_infinity(), T::max);
        let dst = out.row_mut(i);
        let mut sum = T::zero();
        for &j in set {
            let e = (src[j] - m).exp();
            dst[j] = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for &j in set {
            dst[j] *= inv;
        }
    }
    Ok(out)
}

pub(crate) fn masked_softmax_grad<T: Scalar>(
    p: &Tensor<T>,
    dp: &Tensor<T>,
    allowed: &[Vec<usize>],
) -> Tensor<T> {
    let mut out = Tensor::zeros(p.shape());
    for (i, set) in allowed.iter().enumerate() {
        let (pr, gr) = (p.row(i), dp.row(i));
        let inner: T = set.iter().map(|&j| pr[j] * gr[j]).sum();
        let dst = out.row_mut(i);
        for &j in set {
            dst[j] = pr[j] * (gr[j] - inner);
        }
    }
    out
}

/// Saved per-row statistics of a layer-norm forward.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer normalization with affine gain and bias.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(shape_err(
            "layer_norm",
            format!(
                "width {d}, gain {:?}, bias {:?}",
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    let rows = x.rows();
    let inv_d = T::one() / T::of(d as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut out = Tensor::zeros(x.shape());
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for i in 0..rows {
        let src = x.row(i);
        let mean = src.iter().copied().sum::<T>() * inv_d;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        let dst = out.row_mut(i);
        for j in 0..d {
            dst[j] = (src[j] - mean) * rstd * gain.data()[j] + bias.data()[j];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((out, stats))
}

/// Returns (dx, dgain, dbias).
pub(crate) fn layer_norm_grad<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = x.cols();
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dg = Tensor::zeros(gain.shape());
    let mut db = Tensor::zeros(gain.shape());
    let mut xhat = vec![T::zero(); d];
    let mut g_hat = vec![T::zero(); d];
    for i in 0..x.rows() {
        let (src, grad) = (x.row(i), dy.row(i));
        let (mean, rstd) = (stats.mean[i], stats.rstd[i]);
        for j in 0..d {
            xhat[j] = (src[j] - mean) * rstd;
            g_hat[j] = grad[j] * gain.data()[j];
            dg.data_mut()[j] += grad[j] * xhat[j];
            db.data_mut()[j] += grad[j];
        }
        let sum_g: T = g_hat.iter().copied().sum();
        let sum_gx: T = g_hat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
        let dst = dx.row_mut(i);
        for j in 0..d {
            dst[j] = rstd * (g_hat[j] - inv_d * sum_g - xhat[j] * inv_d * sum_gx);
        }
    }
    (dx, dg, db)
}

/// Mean negative log2-likelihood of `targets` under row-wise softmax of `logits`.
///
/// Also returns the softmax probabilities for the backward pass.
pub fn bits_per_byte<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let (rows, v) = (logits.rows(), logits.cols());
    if targets.len() != rows {
        return Err(shape_err(
            "bits_per_byte",
            format!("{} targets for {rows} rows", targets.len()),
        ));
    }
    let mut probs = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::TokenOutOfRange { token: t, vocab: v });
        }
        let src = logits.row(i);
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let dst = probs.row_mut(i);
        let mut sum = T::zero();
        for (p, &z) in dst.iter_mut().zip(src) {
            *p = (z - m).exp();
            sum += *p;
        }
        total += sum.f64().log2() + (m - src[t]).f64() * std::f64::consts::LOG2_E;
        let inv = T::one() / sum;
        for p in dst.iter_mut() {
            *p *= inv;
        }
    }
    let bits = total / rows as f64;
    Ok((T::of(bits), probs))
}
