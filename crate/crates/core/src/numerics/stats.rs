use super::Tensor;
use crate::error::{Result, VtiError};

/// Per-feature sample mean and unbiased (divisor `K - 1`) variance of
/// `samples[K, D]`. Accumulation is two-pass in `f64`.
pub fn feature_stats(samples: &Tensor) -> Result<(Tensor, Tensor)> {
    let &[k, d] = samples.shape() else {
        return Err(VtiError::dim(format!(
            "feature_stats needs a [K, D] tensor, got {:?}",
            samples.shape()
        )));
    };
    if k < 2 {
        return Err(VtiError::InsufficientSamples { needed: 2, got: k });
    }
    let (mean, var) = mean_and_variance(samples.data(), k, d);
    Ok((
        Tensor::new(vec![d], mean.iter().map(|&v| v as f32).collect())?,
        Tensor::new(vec![d], var.iter().map(|&v| v as f32).collect())?,
    ))
}

/// `f64` core of [`feature_stats`] over a flat `[k, d]` buffer.
pub(crate) fn mean_and_variance(data: &[f32], k: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; d];
    for row in data.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += f64::from(v);
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    let mut var = vec![0.0f64; d];
    for row in data.chunks_exact(d) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let dv = f64::from(v) - m;
            *s += dv * dv;
        }
    }
    for s in &mut var {
        *s /= (k - 1) as f64;
    }
    (mean, var)
}
