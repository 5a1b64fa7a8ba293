use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtiError};
use crate::numerics::Tensor;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Share of examples used for fitting; the rest are held out.
    pub train_frac: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            lr: 0.5,
            epochs: 300,
            seed: 0,
            train_frac: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub classes: usize,
}

/// Multinomial logistic regression on frozen features `[N, D]`, trained by
/// full-batch gradient descent from zero weights. Features are standardized
/// with training-split statistics. The split is a seeded shuffle.
pub fn linear_probe(features: &Tensor, labels: &[usize], opts: &ProbeOptions) -> Result<ProbeResult> {
    let &[n, d] = features.shape() else {
        return Err(VtiError::dim(format!("probe features must be [N, D], got {:?}", features.shape())));
    };
    if labels.len() != n {
        return Err(VtiError::dim(format!("{n} feature rows but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(VtiError::Degenerate("linear probe needs at least two classes".into()));
    }
    if !(opts.train_frac > 0.0 && opts.train_frac < 1.0) || !(opts.lr > 0.0) {
        return Err(VtiError::config("probe", "train_frac must be in (0, 1) and lr positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(opts.seed));
    let n_train = ((n as f64 * opts.train_frac).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    let x: Vec<f64> = features.data().iter().map(|&v| f64::from(v)).collect();
    let (mean, scale) = standardizer(&x, train, d);
    let (x, mean, scale) = (&x, &mean, &scale);
    let rows = |ix: &[usize]| -> Vec<f64> {
        ix.iter()
            .flat_map(|&i| (0..d).map(move |j| (x[i * d + j] - mean[j]) * scale[j]))
            .collect()
    };
    let (xtr, xte) = (rows(train), rows(test));
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();

    let mut w = vec![0.0f64; d * classes];
    let mut b = vec![0.0f64; classes];
    for _ in 0..opts.epochs {
        let (_, gw, gb) = probe_loss_and_gradient(&w, &b, &xtr, &ytr, d, classes);
        for (p, g) in w.iter_mut().zip(&gw) {
            *p -= opts.lr * g;
        }
        for (p, g) in b.iter_mut().zip(&gb) {
            *p -= opts.lr * g;
        }
    }
    Ok(ProbeResult {
        accuracy: accuracy(&w, &b, &xte, &yte, d, classes),
        train_accuracy: accuracy(&w, &b, &xtr, &ytr, d, classes),
        classes,
    })
}

/// Mean cross-entropy of softmax(`x W + b`) and its gradient. `w` is
/// `[D, C]` row-major, `x` is `[N, D]`.
pub fn probe_loss_and_gradient(
    w: &[f64],
    b: &[f64],
    x: &[f64],
    y: &[usize],
    d: usize,
    c: usize,
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = y.len();
    let mut gw = vec![0.0; d * c];
    let mut gb = vec![0.0; c];
    let mut loss = 0.0;
    for (row, &label) in x.chunks_exact(d).zip(y) {
        let p = softmax_row(w, b, row, c);
        loss -= p[label].ln();
        for k in 0..c {
            let e = (p[k] - f64::from(u8::from(k == label))) / n as f64;
            gb[k] += e;
            for (j, &v) in row.iter().enumerate() {
                gw[j * c + k] += e * v;
            }
        }
    }
    (loss / n as f64, gw, gb)
}

fn softmax_row(w: &[f64], b: &[f64], row: &[f64], c: usize) -> Vec<f64> {
    let mut z = b.to_vec();
    for (j, &v) in row.iter().enumerate() {
        for k in 0..c {
            z[k] += v * w[j * c + k];
        }
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in &mut z {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter().map(|v| v / s).collect()
}

fn accuracy(w: &[f64], b: &[f64], x: &[f64], y: &[usize], d: usize, c: usize) -> f64 {
    let right = x
        .chunks_exact(d)
        .zip(y)
        .filter(|(row, &label)| {
            let p = softmax_row(w, b, row, c);
            let best = (0..c).fold(0, |best, k| if p[k] > p[best] { k } else { best });
            best == label
        })
        .count();
    right as f64 / y.len() as f64
}

fn standardizer(x: &[f64], train: &[usize], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in train {
        for j in 0..d {
            mean[j] += x[i * d + j] / n;
        }
    }
    let mut var = vec![0.0; d];
    for &i in train {
        for j in 0..d {
            var[j] += (x[i * d + j] - mean[j]).powi(2) / n;
        }
    }
    // constant features are centered but left unscaled
    let scale = var.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_two_class_set() {
        let mut r = rng::rng(1);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let y = i % 2;
            let centre = if y == 0 { -2.0 } else { 2.0 };
            rows.push(vec![centre + r.gen_range(-0.5..0.5), r.gen_range(-1.0..1.0)]);
            labels.push(y);
        }
        let f = Tensor::from_rows(&rows).unwrap();
        let out = linear_probe(&f, &labels, &ProbeOptions::default()).unwrap();
        assert_eq!(out.accuracy, 1.0);
        assert_eq!(out.train_accuracy, 1.0);
    }

    #[test]
    fn single_class_is_degenerate() {
        let f = Tensor::zeros(vec![4, 2]);
        assert!(matches!(
            linear_probe(&f, &[1, 1, 1, 1], &ProbeOptions::default()),
            Err(VtiError::Degenerate(_))
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut r = rng::rng(9);
        let (n, d, c) = (7, 4, 3);
        let x: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<usize> = (0..n).map(|i| i % c).collect();
        let w: Vec<f64> = (0..d * c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let (_, gw, gb) = probe_loss_and_gradient(&w, &b, &x, &y, d, c);
        let h = 1e-5;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (probe_loss_and_gradient(&wp, &b, &x, &y, d, c).0
                - probe_loss_and_gradient(&wm, &b, &x, &y, d, c).0)
                / (2.0 * h);
            assert!((fd - gw[i]).abs() <= 1e-3 * gw[i].abs().max(1e-6), "w[{i}]: {fd} vs {}", gw[i]);
        }
        for i in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += h;
            bm[i] -= h;
            let fd = (probe_loss_and_gradient(&w, &bp, &x, &y, d, c).0
                - probe_loss_and_gradient(&w, &bm, &x, &y, d, c).0)
                / (2.0 * h);
            assert!((fd - gb[i]).abs() <= 1e-3 * gb[i].abs().max(1e-6));
        }
    }
}
