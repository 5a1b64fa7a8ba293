//! Slice-level kernels shared by [`Tensor`](super::Tensor) and the model.
//!
//! All kernels are generic over [`Real`] so the model can run in `f32` for
//! training and inference and in `f64` for finite-difference checks through
//! the very same code. Loop orders are fixed: every output element of a
//! product accumulates its terms left to right over the inner index.

use super::Real;

/// `c[m,n] += a[m,k] * b[k,n]`.
pub fn matmul_acc<S: Real>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Four rows at a time share each row of `b`; every element still sums
    // over `k` in ascending order, so blocking does not change any bits.
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let a0 = a[i * k + kk];
            let a1 = a[(i + 1) * k + kk];
            let a2 = a[(i + 2) * k + kk];
            let a3 = a[(i + 3) * k + kk];
            for j in 0..n {
                let bj = b_row[j];
                c0[j] += a0 * bj;
                c1[j] += a1 * bj;
                c2[j] += a2 * bj;
                c3[j] += a3 * bj;
            }
        }
        i += 4;
    }
    for i in i..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// `a[m,k] * b[k,n]`.
pub fn matmul<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// `c[m,n] += a[k,m]^T * b[k,n]`. Used for weight gradients.
pub fn matmul_tn_acc<S: Real>(c: &mut [S], a: &[S], b: &[S], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let a_row = &a[kk * m + i..kk * m + i + 4];
            let (a0, a1, a2, a3) = (a_row[0], a_row[1], a_row[2], a_row[3]);
            for j in 0..n {
                let bj = b_row[j];
                c0[j] += a0 * bj;
                c1[j] += a1 * bj;
                c2[j] += a2 * bj;
                c3[j] += a3 * bj;
            }
        }
        i += 4;
    }
    for i in i..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aki = a[kk * m + i];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aki * bj;
            }
        }
    }
}

/// `a[m,k] * b[n,k]^T`, via an explicit transpose of `b`.
pub fn matmul_nt<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

pub fn transpose<S: Real>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Adds `bias[n]` to every row of `x[m,n]`.
pub fn add_row_bias<S: Real>(x: &mut [S], bias: &[S]) {
    let n = bias.len();
    for row in x.chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of `x[m,n]` accumulated into `out[n]`.
pub fn col_sum_acc<S: Real>(out: &mut [S], x: &[S]) {
    let n = out.len();
    for row in x.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// In-place numerically stable softmax of one slice.
pub fn softmax_in_place<S: Real>(x: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise layer normalization of `x[m,d]`. Returns the output together
/// with the normalized values and per-row inverse standard deviations,
/// which the backward pass needs.
pub fn layer_norm_rows<S: Real>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    eps: S,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let d = gain.len();
    let rows = x.len() / d;
    let inv_d = S::one() / S::from_usize(d).unwrap();
    let mut out = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().fold(S::zero(), |a, v| a + v) * inv_d;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .fold(S::zero(), |a, v| a + v)
            * inv_d;
        let is = S::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, inv_std)
}

/// Backward pass of [`layer_norm_rows`]. Accumulates parameter gradients
/// and returns the input gradient.
pub fn layer_norm_rows_backward<S: Real>(
    dy: &[S],
    xhat: &[S],
    inv_std: &[S],
    gain: &[S],
    dgain: &mut [S],
    dbias: &mut [S],
) -> Vec<S> {
    let d = gain.len();
    let inv_d = S::one() / S::from_usize(d).unwrap();
    let mut dx = vec![S::zero(); dy.len()];
    let mut dxhat = vec![S::zero(); d];
    for (r, &is) in inv_std.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = S::zero();
        let mut mean_dxhat_xhat = S::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xr[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for j in 0..d {
            dx[r * d + j] = is * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU, written as `x * sigmoid(2u)`, which equals
/// `0.5 x (1 + tanh(u))` with `u = c (x + k x^3)`.
pub fn gelu<S: Real>(x: S) -> S {
    let c = S::from_f64(2.0 * GELU_C).unwrap();
    let k = S::from_f64(GELU_K).unwrap();
    x / (S::one() + (-(c * (x + k * x * x * x))).exp())
}

pub fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::from_f64(2.0 * GELU_C).unwrap();
    let k = S::from_f64(GELU_K).unwrap();
    let three = S::from_f64(3.0).unwrap();
    let sig = S::one() / (S::one() + (-(c * (x + k * x * x * x))).exp());
    sig + x * sig * (S::one() - sig) * c * (S::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tn_and_nt_agree_with_explicit_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect(); // 2x4
        let mut c = vec![0.0; 12];
        matmul_tn_acc(&mut c, &a, &b, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        assert_eq!(c, matmul(&at, &b, 3, 2, 4));

        let bt = transpose(&b, 2, 4); // 4x2
        let x = matmul_nt(&at, &bt, 3, 2, 4);
        assert_eq!(x, matmul(&at, &b, 3, 2, 4));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
