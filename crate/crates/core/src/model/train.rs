//! Next-token training with hand-derived gradients and Adam.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::block::{block_backward, block_forward, BlockCache, KvCache, Visibility};
use super::forward::{check_image, embed_patches, patchify, ToyLvlm};
use super::params::{ParamLayout, Params};
use super::ModelConfig;
use crate::error::{Result, VtiError};
use crate::numerics::kernels::{
    add_row_bias, col_sum_acc, layer_norm_rows, layer_norm_rows_backward, matmul, matmul_nt,
    matmul_tn_acc,
};
use crate::numerics::{Real, LN_EPS};
use crate::perturb::Image;
use crate::rng;
use crate::vocab::Token;

use rand::seq::SliceRandom;

/// One text sequence sharing the image prefix. Tokens from index
/// `answer_start` on are prediction targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub tokens: Vec<Token>,
    pub answer_start: usize,
}

/// An image with one or more text segments. Segments attend to the image
/// and to themselves, never to each other.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub image: Image,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Linear ramp from 0 to `lr` over the first steps.
    pub warmup_steps: usize,
    /// Cosine decay after warmup ends at `lr * final_lr_frac`; 1 keeps `lr`.
    pub final_lr_frac: f32,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            lr: 3e-4,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            final_lr_frac: 1.0,
        }
    }
}

impl TrainOptions {
    /// Learning rate for step `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f32 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let done = (step - self.warmup_steps) as f32 / span as f32;
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * done.min(1.0)).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyLvlm,
    /// Mean loss before training, then the mean of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Initializes weights from `opts.seed` and trains on `data`.
pub fn train(config: ModelConfig, data: &[TrainExample], opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let layout = Arc::new(ParamLayout::new(config));
    train_from(Params::init(layout, opts.seed), data, opts)
}

/// Continues training from existing weights.
pub fn train_from(mut params: Params<f32>, data: &[TrainExample], opts: &TrainOptions) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(VtiError::InsufficientSamples { needed: 1, got: 0 });
    }
    if opts.batch_size == 0 {
        return Err(VtiError::config("train.batch_size", "must be positive"));
    }
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
        return Err(VtiError::config("train.lr", "must be finite and >= 0"));
    }
    if !(0.0..=1.0).contains(&opts.final_lr_frac) {
        return Err(VtiError::config("train.final_lr_frac", "must be in [0, 1]"));
    }
    let c = params.config();
    for ex in data {
        check_example(&c, ex)?;
    }

    let mut losses = vec![0.0f32; data.len()];
    for (l, ex) in losses.iter_mut().zip(data) {
        *l = example_loss(&params, ex)?;
    }
    let mut curve = vec![mean_in_order(&losses)];
    if !curve[0].is_finite() {
        return Err(VtiError::Divergence { epoch: 0 });
    }

    let n = params.data.len();
    let mut m = vec![0.0f32; n];
    let mut v = vec![0.0f32; n];
    let mut grads = Params::<f32>::zeros(params.layout.clone());
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let total_steps = opts.epochs * data.len().div_ceil(opts.batch_size);
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng::stream(opts.seed, epoch as u64));
        for batch in order.chunks(opts.batch_size) {
            grads.data.fill(0.0);
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                losses[i] = accumulate_gradient(&params, &data[i], scale, &mut grads)?;
                if !losses[i].is_finite() {
                    return Err(VtiError::Divergence { epoch });
                }
            }
            step += 1;
            let lr = opts.lr_at(step as usize - 1, total_steps);
            let bc1 = 1.0 - opts.beta1.powi(step);
            let bc2 = 1.0 - opts.beta2.powi(step);
            for (((w, &g), mi), vi) in params.data.iter_mut().zip(&grads.data).zip(&mut m).zip(&mut v) {
                *mi = opts.beta1 * *mi + (1.0 - opts.beta1) * g;
                *vi = opts.beta2 * *vi + (1.0 - opts.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + opts.eps);
            }
        }
        let mean = mean_in_order(&losses);
        if !mean.is_finite() || params.data.iter().any(|w| !w.is_finite()) {
            return Err(VtiError::Divergence { epoch });
        }
        log::info!("epoch {epoch}/{}: loss {mean:.5}", opts.epochs);
        curve.push(mean);
    }
    Ok(TrainOutcome {
        model: ToyLvlm::new(params)?,
        loss_curve: curve,
    })
}

fn mean_in_order(values: &[f32]) -> f64 {
    values.iter().map(|&v| f64::from(v)).sum::<f64>() / values.len() as f64
}

fn check_example(c: &ModelConfig, ex: &TrainExample) -> Result<()> {
    check_image(c, &ex.image)?;
    if ex.segments.is_empty() {
        return Err(VtiError::Generation("training example has no text".into()));
    }
    for s in &ex.segments {
        if s.answer_start == 0 || s.answer_start >= s.tokens.len() {
            return Err(VtiError::Generation(format!(
                "answer start {} invalid for a {}-token segment",
                s.answer_start,
                s.tokens.len()
            )));
        }
        if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(VtiError::Generation(format!("token {t} outside vocabulary")));
        }
    }
    let total = c.vision_tokens() + ex.segments.iter().map(|s| s.tokens.len()).sum::<usize>();
    if total > c.max_seq {
        return Err(VtiError::Length {
            len: total,
            max: c.max_seq,
        });
    }
    Ok(())
}

/// Mean next-token cross-entropy over the answer tokens of one example.
pub fn example_loss<S: Real>(params: &Params<S>, ex: &TrainExample) -> Result<S> {
    check_example(&params.config(), ex)?;
    Ok(Pass::run(params, ex).loss)
}

/// Loss and full gradient for one example.
pub fn loss_and_gradient<S: Real>(params: &Params<S>, ex: &TrainExample) -> Result<(S, Params<S>)> {
    let mut grads = Params::zeros(params.layout.clone());
    let loss = accumulate_gradient(params, ex, S::one(), &mut grads)?;
    Ok((loss, grads))
}

/// Adds `scale * dloss/dparams` into `grads` and returns the loss.
pub fn accumulate_gradient<S: Real>(params: &Params<S>, ex: &TrainExample, scale: S, grads: &mut Params<S>) -> Result<S> {
    check_example(&params.config(), ex)?;
    let pass = Pass::run(params, ex);
    pass.backward(params, scale, grads);
    Ok(pass.loss)
}

/// Everything the backward pass needs from one forward pass.
struct Pass<S> {
    loss: S,
    patches: Vec<S>,
    enc: Vec<BlockCache<S>>,
    features: Vec<S>,
    enc_xhat: Vec<S>,
    enc_is: Vec<S>,
    dec: Vec<BlockCache<S>>,
    /// Absolute row, token id, and position id for every text row.
    text_rows: Vec<(usize, Token, usize)>,
    /// Absolute rows that predict a target, with that target.
    targets: Vec<(usize, Token)>,
    head_in: Vec<S>,
    head_xhat: Vec<S>,
    head_is: Vec<S>,
    probs: Vec<S>,
}

impl<S: Real> Pass<S> {
    fn run(p: &Params<S>, ex: &TrainExample) -> Self {
        let c = p.config();
        let lay = &p.layout;
        let (t, dv, dd, vsz) = (c.vision_tokens(), c.enc_width, c.dec_width, c.vocab_size);
        let eps = S::lift(LN_EPS);

        let patches = patchify::<S>(&c, ex.image.data());
        let mut x = embed_patches(p, ex.image.data());
        let mut enc = Vec::with_capacity(c.enc_layers);
        for b in &lay.enc_blocks {
            let (y, cache) = block_forward(p, b, &x, &mut KvCache::new(), Visibility::Full, 0);
            enc.push(cache);
            x = y;
        }
        let (features, enc_xhat, enc_is) = layer_norm_rows(&x, p.get(&lay.enc_lnf_g), p.get(&lay.enc_lnf_b), eps);
        let mut emb = matmul(&features, p.get(&lay.proj_w), t, dv, dd);
        add_row_bias(&mut emb, p.get(&lay.proj_b));

        let tok = p.get(&lay.tok);
        let pos = p.get(&lay.dec_pos);
        let mut x = emb;
        for (v, &q) in x.iter_mut().zip(&pos[..t * dd]) {
            *v += q;
        }
        let mut seg_start = vec![0usize; t];
        let mut text_rows = Vec::new();
        let mut targets = Vec::new();
        for s in &ex.segments {
            let start = t + text_rows.len();
            for (j, &id) in s.tokens.iter().enumerate() {
                let row = start + j;
                let e = &tok[id as usize * dd..(id as usize + 1) * dd];
                let q = &pos[(t + j) * dd..(t + j + 1) * dd];
                x.extend(e.iter().zip(q).map(|(&a, &b)| a + b));
                seg_start.push(start);
                text_rows.push((row, id, t + j));
                if j + 1 >= s.answer_start && j + 1 < s.tokens.len() {
                    targets.push((row, s.tokens[j + 1]));
                }
            }
        }
        let vis = Visibility::Segmented {
            prefix: t,
            seg_start: &seg_start,
        };
        let mut dec = Vec::with_capacity(c.dec_layers);
        for b in &lay.dec_blocks {
            let (y, cache) = block_forward(p, b, &x, &mut KvCache::new(), vis, 0);
            dec.push(cache);
            x = y;
        }

        let mut rows = Vec::with_capacity(targets.len() * dd);
        for &(r, _) in &targets {
            rows.extend_from_slice(&x[r * dd..(r + 1) * dd]);
        }
        let (head_in, head_xhat, head_is) = layer_norm_rows(&rows, p.get(&lay.dec_lnf_g), p.get(&lay.dec_lnf_b), eps);
        let mut probs = matmul(&head_in, p.get(&lay.head_w), targets.len(), dd, vsz);
        let mut loss = S::zero();
        for (row, &(_, target)) in probs.chunks_exact_mut(vsz).zip(&targets) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            loss -= row[target as usize].ln();
        }
        loss /= S::from_usize(targets.len()).unwrap();

        Pass {
            loss,
            patches,
            enc,
            features,
            enc_xhat,
            enc_is,
            dec,
            text_rows,
            targets,
            head_in,
            head_xhat,
            head_is,
            probs,
        }
    }

    fn backward(&self, p: &Params<S>, scale: S, g: &mut Params<S>) {
        let c = p.config();
        let lay = &p.layout;
        let (t, dv, dd, vsz) = (c.vision_tokens(), c.enc_width, c.dec_width, c.vocab_size);
        let nt = self.targets.len();
        let n = t + self.text_rows.len();

        let norm = scale / S::from_usize(nt).unwrap();
        let mut dlogits = self.probs.clone();
        for (row, &(_, target)) in dlogits.chunks_exact_mut(vsz).zip(&self.targets) {
            row[target as usize] -= S::one();
            for v in row.iter_mut() {
                *v *= norm;
            }
        }
        matmul_tn_acc(g.get_mut(&lay.head_w), &self.head_in, &dlogits, nt, dd, vsz);
        let dh = matmul_nt(&dlogits, p.get(&lay.head_w), nt, vsz, dd);
        let drows = {
            let (dg, db) = super::block::split_two(g, &lay.dec_lnf_g, &lay.dec_lnf_b);
            layer_norm_rows_backward(&dh, &self.head_xhat, &self.head_is, p.get(&lay.dec_lnf_g), dg, db)
        };
        let mut dx = vec![S::zero(); n * dd];
        for (i, &(r, _)) in self.targets.iter().enumerate() {
            for (a, &b) in dx[r * dd..(r + 1) * dd].iter_mut().zip(&drows[i * dd..(i + 1) * dd]) {
                *a += b;
            }
        }

        for (b, cache) in lay.dec_blocks.iter().zip(&self.dec).rev() {
            dx = block_backward(p, b, cache, &dx, g);
        }

        {
            let dtok = g.get_mut(&lay.tok);
            for &(r, id, _) in &self.text_rows {
                let dst = &mut dtok[id as usize * dd..(id as usize + 1) * dd];
                for (a, &b) in dst.iter_mut().zip(&dx[r * dd..(r + 1) * dd]) {
                    *a += b;
                }
            }
        }
        {
            let dpos = g.get_mut(&lay.dec_pos);
            for (a, &b) in dpos[..t * dd].iter_mut().zip(&dx[..t * dd]) {
                *a += b;
            }
            for &(r, _, q) in &self.text_rows {
                let dst = &mut dpos[q * dd..(q + 1) * dd];
                for (a, &b) in dst.iter_mut().zip(&dx[r * dd..(r + 1) * dd]) {
                    *a += b;
                }
            }
        }

        let demb = &dx[..t * dd];
        matmul_tn_acc(g.get_mut(&lay.proj_w), &self.features, demb, t, dv, dd);
        col_sum_acc(g.get_mut(&lay.proj_b), demb);
        let dfeat = matmul_nt(demb, p.get(&lay.proj_w), t, dd, dv);
        let mut dx = {
            let (dg, db) = super::block::split_two(g, &lay.enc_lnf_g, &lay.enc_lnf_b);
            layer_norm_rows_backward(&dfeat, &self.enc_xhat, &self.enc_is, p.get(&lay.enc_lnf_g), dg, db)
        };
        for (b, cache) in lay.enc_blocks.iter().zip(&self.enc).rev() {
            dx = block_backward(p, b, cache, &dx, g);
        }
        matmul_tn_acc(g.get_mut(&lay.patch_w), &self.patches, &dx, t, c.patch_dim(), dv);
        col_sum_acc(g.get_mut(&lay.patch_b), &dx);
        for (a, &b) in g.get_mut(&lay.enc_pos).iter_mut().zip(&dx) {
            *a += b;
        }
    }
}
