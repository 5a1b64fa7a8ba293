//! Pre-norm transformer block: `x + Attn(LN(x))`, then `+ MLP(LN(.))`,
//! with a hand-derived backward pass.

use std::ops::Range;

use super::params::{BlockOffsets, Params};
use crate::numerics::kernels::{
    add_row_bias, col_sum_acc, gelu, gelu_grad, layer_norm_rows, layer_norm_rows_backward,
    matmul, matmul_nt, matmul_tn_acc,
};
use crate::numerics::{Real, LN_EPS};

/// Keys and values of every position processed so far, `[len, width]`.
#[derive(Debug, Clone)]
pub(crate) struct KvCache<S> {
    pub k: Vec<S>,
    pub v: Vec<S>,
    pub len: usize,
}

impl<S> KvCache<S> {
    pub fn new() -> Self {
        KvCache {
            k: Vec::new(),
            v: Vec::new(),
            len: 0,
        }
    }
}

/// Which keys a query may attend to.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Visibility<'a> {
    /// Every key (bidirectional encoder).
    Full,
    /// Keys at or before the query.
    Causal,
    /// Keys in `[0, prefix)` plus `[seg_start[q], q]`. Lets several text
    /// segments share one vision prefix without seeing each other.
    Segmented { prefix: usize, seg_start: &'a [usize] },
}

impl Visibility<'_> {
    fn ranges(&self, q: usize, n_keys: usize) -> [Range<usize>; 2] {
        match *self {
            Visibility::Full => [0..n_keys, 0..0],
            Visibility::Causal => [0..q + 1, 0..0],
            Visibility::Segmented { prefix, seg_start } => {
                if q < prefix {
                    [0..q + 1, 0..0]
                } else {
                    [0..prefix, seg_start[q]..q + 1]
                }
            }
        }
    }
}

/// Intermediates kept for the backward pass and for attention recording.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache<S> {
    pub n: usize,
    pub n_keys: usize,
    pub first_pos: usize,
    ln1_xhat: Vec<S>,
    ln1_is: Vec<S>,
    a: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    /// Dense `[heads, n, n_keys]`, zero where masked.
    pub probs: Vec<S>,
    o: Vec<S>,
    ln2_xhat: Vec<S>,
    ln2_is: Vec<S>,
    c: Vec<S>,
    pre: Vec<S>,
    g: Vec<S>,
}

/// Runs the block on `x` (`n` new positions starting at absolute position
/// `first_pos`), appending their keys and values to `kv`.
pub(crate) fn block_forward<S: Real>(
    p: &Params<S>,
    b: &BlockOffsets,
    x: &[S],
    kv: &mut KvCache<S>,
    vis: Visibility<'_>,
    first_pos: usize,
) -> (Vec<S>, BlockCache<S>) {
    let d = b.width;
    let n = x.len() / d;
    let heads = b.heads;
    let dh = d / heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let eps = S::lift(LN_EPS);
    debug_assert_eq!(kv.len, first_pos);

    let (a, ln1_xhat, ln1_is) = layer_norm_rows(x, p.get(&b.ln1_g), p.get(&b.ln1_b), eps);
    let mut qkv = matmul(&a, p.get(&b.qkv_w), n, d, 3 * d);
    add_row_bias(&mut qkv, p.get(&b.qkv_b));
    let mut q = Vec::with_capacity(n * d);
    for row in qkv.chunks_exact(3 * d) {
        q.extend_from_slice(&row[..d]);
        kv.k.extend_from_slice(&row[d..2 * d]);
        kv.v.extend_from_slice(&row[2 * d..]);
    }
    kv.len += n;
    let n_keys = kv.len;

    let mut probs = vec![S::zero(); heads * n * n_keys];
    let mut o = vec![S::zero(); n * d];
    let mut keys: Vec<usize> = Vec::with_capacity(n_keys);
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        let qh = head_cols(&q, d, hs.clone());
        let kh = head_cols(&kv.k, d, hs.clone());
        let vh = head_cols(&kv.v, d, hs.clone());
        let scores = matmul_nt(&qh, &kh, n, dh, n_keys);
        let ph = &mut probs[h * n * n_keys..(h + 1) * n * n_keys];
        for i in 0..n {
            keys.clear();
            for r in vis.ranges(first_pos + i, n_keys) {
                keys.extend(r);
            }
            let srow = &scores[i * n_keys..(i + 1) * n_keys];
            let prow = &mut ph[i * n_keys..(i + 1) * n_keys];
            let mut max = S::neg_infinity();
            for &j in &keys {
                prow[j] = srow[j] * scale;
                max = max.max(prow[j]);
            }
            let mut sum = S::zero();
            for &j in &keys {
                prow[j] = (prow[j] - max).exp();
                sum += prow[j];
            }
            for &j in &keys {
                prow[j] /= sum;
            }
        }
        // masked probabilities are exact zeros, so they add nothing here
        let oh = matmul(ph, &vh, n, n_keys, dh);
        scatter_cols(&mut o, &oh, d, hs);
    }

    let mut x1 = matmul(&o, p.get(&b.out_w), n, d, d);
    add_row_bias(&mut x1, p.get(&b.out_b));
    for (v, &xi) in x1.iter_mut().zip(x) {
        *v += xi;
    }

    let (c, ln2_xhat, ln2_is) = layer_norm_rows(&x1, p.get(&b.ln2_g), p.get(&b.ln2_b), eps);
    let mut pre = matmul(&c, p.get(&b.fc1_w), n, d, b.hidden);
    add_row_bias(&mut pre, p.get(&b.fc1_b));
    let g: Vec<S> = pre.iter().map(|&v| gelu(v)).collect();
    let mut y = matmul(&g, p.get(&b.fc2_w), n, b.hidden, d);
    add_row_bias(&mut y, p.get(&b.fc2_b));
    for (v, &xi) in y.iter_mut().zip(&x1) {
        *v += xi;
    }

    let cache = BlockCache {
        n,
        n_keys,
        first_pos,
        ln1_xhat,
        ln1_is,
        a,
        q,
        k: kv.k.clone(),
        v: kv.v.clone(),
        probs,
        o,
        ln2_xhat,
        ln2_is,
        c,
        pre,
        g,
    };
    (y, cache)
}

/// Backward pass for a block that was run over a whole sequence from an
/// empty cache. Accumulates parameter gradients into `grads`.
pub(crate) fn block_backward<S: Real>(
    p: &Params<S>,
    b: &BlockOffsets,
    cache: &BlockCache<S>,
    dy: &[S],
    grads: &mut Params<S>,
) -> Vec<S> {
    let d = b.width;
    let n = cache.n;
    let hidden = b.hidden;
    let heads = b.heads;
    let dh = d / heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    assert_eq!(cache.first_pos, 0, "backward needs a full-sequence forward");
    assert_eq!(cache.n_keys, n);

    // MLP
    matmul_tn_acc(grads.get_mut(&b.fc2_w), &cache.g, dy, n, hidden, d);
    col_sum_acc(grads.get_mut(&b.fc2_b), dy);
    let mut dpre = matmul_nt(dy, p.get(&b.fc2_w), n, d, hidden);
    for (dv, &pv) in dpre.iter_mut().zip(&cache.pre) {
        *dv *= gelu_grad(pv);
    }
    matmul_tn_acc(grads.get_mut(&b.fc1_w), &cache.c, &dpre, n, d, hidden);
    col_sum_acc(grads.get_mut(&b.fc1_b), &dpre);
    let dc = matmul_nt(&dpre, p.get(&b.fc1_w), n, hidden, d);
    let mut dx1 = {
        let (dg, db) = split_two(grads, &b.ln2_g, &b.ln2_b);
        layer_norm_rows_backward(&dc, &cache.ln2_xhat, &cache.ln2_is, p.get(&b.ln2_g), dg, db)
    };
    for (v, &g) in dx1.iter_mut().zip(dy) {
        *v += g;
    }

    // attention output projection
    matmul_tn_acc(grads.get_mut(&b.out_w), &cache.o, &dx1, n, d, d);
    col_sum_acc(grads.get_mut(&b.out_b), &dx1);
    let d_o = matmul_nt(&dx1, p.get(&b.out_w), n, d, d);

    let mut dq = vec![S::zero(); n * d];
    let mut dk = vec![S::zero(); n * d];
    let mut dv = vec![S::zero(); n * d];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        let ph = &cache.probs[h * n * n..(h + 1) * n * n];
        let qh = head_cols(&cache.q, d, hs.clone());
        let kh = head_cols(&cache.k, d, hs.clone());
        let vh = head_cols(&cache.v, d, hs.clone());
        let doh = head_cols(&d_o, d, hs.clone());
        let mut ds = matmul_nt(&doh, &vh, n, dh, n);
        for (srow, prow) in ds.chunks_exact_mut(n).zip(ph.chunks_exact(n)) {
            let weighted = srow.iter().zip(prow).fold(S::zero(), |a, (&x, &p)| a + x * p);
            for (x, &p) in srow.iter_mut().zip(prow) {
                *x = p * (*x - weighted) * scale;
            }
        }
        scatter_cols(&mut dq, &matmul(&ds, &kh, n, n, dh), d, hs.clone());
        let mut dkh = vec![S::zero(); n * dh];
        matmul_tn_acc(&mut dkh, &ds, &qh, n, n, dh);
        scatter_cols(&mut dk, &dkh, d, hs.clone());
        let mut dvh = vec![S::zero(); n * dh];
        matmul_tn_acc(&mut dvh, ph, &doh, n, n, dh);
        scatter_cols(&mut dv, &dvh, d, hs);
    }

    let mut dqkv = vec![S::zero(); n * 3 * d];
    for i in 0..n {
        let row = &mut dqkv[i * 3 * d..(i + 1) * 3 * d];
        row[..d].copy_from_slice(&dq[i * d..(i + 1) * d]);
        row[d..2 * d].copy_from_slice(&dk[i * d..(i + 1) * d]);
        row[2 * d..].copy_from_slice(&dv[i * d..(i + 1) * d]);
    }
    matmul_tn_acc(grads.get_mut(&b.qkv_w), &cache.a, &dqkv, n, d, 3 * d);
    col_sum_acc(grads.get_mut(&b.qkv_b), &dqkv);
    let da = matmul_nt(&dqkv, p.get(&b.qkv_w), n, 3 * d, d);
    let mut dx = {
        let (dg, db) = split_two(grads, &b.ln1_g, &b.ln1_b);
        layer_norm_rows_backward(&da, &cache.ln1_xhat, &cache.ln1_is, p.get(&b.ln1_g), dg, db)
    };
    for (v, &g) in dx.iter_mut().zip(&dx1) {
        *v += g;
    }
    dx
}

/// Columns `cols` of a row-major `[rows, d]` matrix, packed.
fn head_cols<S: Real>(x: &[S], d: usize, cols: Range<usize>) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len() / d * cols.len());
    for row in x.chunks_exact(d) {
        out.extend_from_slice(&row[cols.clone()]);
    }
    out
}

fn scatter_cols<S: Real>(x: &mut [S], packed: &[S], d: usize, cols: Range<usize>) {
    let w = cols.len();
    for (row, src) in x.chunks_exact_mut(d).zip(packed.chunks_exact(w)) {
        row[cols.clone()].copy_from_slice(src);
    }
}

/// Two disjoint mutable views into the gradient buffer.
pub(crate) fn split_two<'a, S>(
    grads: &'a mut Params<S>,
    first: &Range<usize>,
    second: &Range<usize>,
) -> (&'a mut [S], &'a mut [S]) {
    assert!(first.end <= second.start, "ranges must be ordered and disjoint");
    let (lo, hi) = grads.data.split_at_mut(second.start);
    (&mut lo[first.clone()], &mut hi[..second.len()])
}
