//! Inference: image encoding, incremental decoding and greedy generation.

use super::block::{block_forward, KvCache, Visibility};
use super::hooks::{HookSet, HookSite};
use super::params::{ParamLayout, Params};
use super::ModelConfig;
use crate::error::{Result, VtiError};
use crate::numerics::kernels::{add_row_bias, layer_norm_rows, matmul, matmul_acc};
use crate::numerics::{Real, Tensor, LN_EPS};
use crate::perturb::{Image, CHANNELS};
use crate::vocab::{Token, EOS};

use std::sync::Arc;

/// Encoder states recorded during [`ToyLvlm::encode_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct VisionTrace {
    /// Layer outputs before any hook, `[L_v, T, D_v]`.
    pub states: Tensor,
    /// Layer outputs after hooks (what the next layer consumed).
    pub shifted: Tensor,
    /// Final-layer features after the closing layer norm, `[T, D_v]`.
    pub features: Tensor,
}

/// Decoder states for the text positions of one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace {
    /// `[L_d, S, D_d]`, before hooks.
    pub states: Tensor,
    /// `[L_d, S, D_d]`, after hooks.
    pub shifted: Tensor,
    /// `[L_d, H, S, T + S]`; keys are `[vision ‖ text]`.
    pub attention: Tensor,
    /// `[S, V]`.
    pub logits: Tensor,
}

/// Per-step record of a generation: the row that produced the new token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// `[L_d, H, K]` over the `K` keys visible at that step.
    pub attention: Tensor,
    /// `[L_d, D_d]`, before hooks.
    pub states: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub vision: VisionTrace,
    pub steps: Vec<StepTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// New tokens, including a final EOS when one was produced.
    pub tokens: Vec<Token>,
    /// Stopped because the sequence reached `max_seq`.
    pub truncated: bool,
    pub trace: GenerationTrace,
}

impl Generation {
    /// Generated tokens without the trailing EOS.
    pub fn content(&self) -> &[Token] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// The toy vision-language model. Weights are immutable once built.
#[derive(Debug, Clone)]
pub struct ToyLvlm {
    params: Params<f32>,
}

impl ToyLvlm {
    pub fn new(params: Params<f32>) -> Result<Self> {
        params.config().validate()?;
        if let Some(index) = params.data().iter().position(|v| !v.is_finite()) {
            return Err(VtiError::NonFinite { index });
        }
        Ok(ToyLvlm { params })
    }

    /// Freshly initialized weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(ParamLayout::new(config));
        Ok(ToyLvlm {
            params: Params::init(layout, seed),
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.params.config()
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn into_params(self) -> Params<f32> {
        self.params
    }

    /// Runs the vision encoder and projector. Each layer output is recorded,
    /// then shifted by the hooks at that layer, then fed onward.
    pub fn encode_image(&self, image: &Image, hooks: &HookSet) -> Result<(Tensor, VisionTrace)> {
        let c = self.config();
        check_image(&c, image)?;
        hooks.validate(&c)?;
        let lay = &self.params.layout;
        let (t, dv, dd) = (c.vision_tokens(), c.enc_width, c.dec_width);

        let mut x: Vec<f32> = embed_patches(&self.params, image.data());
        let mut states = Vec::with_capacity(c.enc_layers * t * dv);
        let mut shifted = Vec::with_capacity(c.enc_layers * t * dv);
        for (l, b) in lay.enc_blocks.iter().enumerate() {
            let mut kv = KvCache::new();
            let (mut y, _) = block_forward(&self.params, b, &x, &mut kv, Visibility::Full, 0);
            states.extend_from_slice(&y);
            hooks.at(HookSite::Vision(l)).apply(&mut y, dv, 0, false);
            shifted.extend_from_slice(&y);
            x = y;
        }
        let p = &self.params;
        let (features, _, _) = layer_norm_rows(&x, p.get(&lay.enc_lnf_g), p.get(&lay.enc_lnf_b), LN_EPS);
        let mut emb = matmul(&features, p.get(&lay.proj_w), t, dv, dd);
        add_row_bias(&mut emb, p.get(&lay.proj_b));

        let trace = VisionTrace {
            states: Tensor::from_parts_unchecked(vec![c.enc_layers, t, dv], states),
            shifted: Tensor::from_parts_unchecked(vec![c.enc_layers, t, dv], shifted),
            features: Tensor::from_parts_unchecked(vec![t, dv], features),
        };
        Ok((Tensor::from_parts_unchecked(vec![t, dd], emb), trace))
    }

    /// Starts a decoder session with the vision prefix already processed.
    /// Only `All`/`Indices` hooks act on the prefix.
    pub fn session(&self, vision_embeddings: &Tensor, hooks: &HookSet) -> Result<DecoderSession<'_>> {
        let c = self.config();
        if vision_embeddings.shape() != [c.vision_tokens(), c.dec_width] {
            return Err(VtiError::dim(format!(
                "vision embeddings have shape {:?}, expected [{}, {}]",
                vision_embeddings.shape(),
                c.vision_tokens(),
                c.dec_width
            )));
        }
        hooks.validate(&c)?;
        let lay = &self.params.layout;
        let mut x = vision_embeddings.data().to_vec();
        let pos = self.params.get(&lay.dec_pos);
        for (v, &p) in x.iter_mut().zip(pos) {
            *v += p;
        }
        let mut session = DecoderSession {
            model: self,
            kv: (0..c.dec_layers).map(|_| KvCache::new()).collect(),
            len: 0,
        };
        session.run(x, hooks, false);
        Ok(session)
    }

    /// Logits for the token after `prefix`, plus the trace of every text
    /// position.
    pub fn decode_step(
        &self,
        vision_embeddings: &Tensor,
        prefix: &[Token],
        hooks: &HookSet,
    ) -> Result<(Tensor, DecoderTrace)> {
        let mut session = self.session(vision_embeddings, hooks)?;
        let trace = session.feed(prefix, hooks)?;
        let v = self.config().vocab_size;
        let last = trace.logits.data()[(prefix.len() - 1) * v..].to_vec();
        Ok((Tensor::from_parts_unchecked(vec![v], last), trace))
    }

    /// Greedy decoding after `prompt`, until EOS, `max_new` tokens, or a
    /// full sequence. Ties go to the lowest token id.
    pub fn generate(&self, image: &Image, prompt: &[Token], hooks: &HookSet, max_new: usize) -> Result<Generation> {
        let (emb, vision) = self.encode_image(image, hooks)?;
        let (tokens, truncated, steps) = self.greedy(&emb, prompt, hooks, max_new)?;
        Ok(Generation {
            tokens,
            truncated,
            trace: GenerationTrace { vision, steps },
        })
    }

    /// Greedy decoding from precomputed vision embeddings. Returns the new
    /// tokens and whether the sequence filled up.
    pub fn generate_from_embeddings(
        &self,
        vision_embeddings: &Tensor,
        prompt: &[Token],
        hooks: &HookSet,
        max_new: usize,
    ) -> Result<(Vec<Token>, bool)> {
        let (tokens, truncated, _) = self.greedy(vision_embeddings, prompt, hooks, max_new)?;
        Ok((tokens, truncated))
    }

    fn greedy(
        &self,
        emb: &Tensor,
        prompt: &[Token],
        hooks: &HookSet,
        max_new: usize,
    ) -> Result<(Vec<Token>, bool, Vec<StepTrace>)> {
        let mut session = self.session(emb, hooks)?;
        let c = self.config();
        let mut out = session.feed(prompt, hooks)?;
        let mut tokens = Vec::new();
        let mut steps = Vec::new();
        let mut truncated = false;
        while tokens.len() < max_new {
            let s = out.logits.shape()[0];
            let next = argmax(out.logits.slice(&[s - 1])) as Token;
            steps.push(newest_step(&out, &c));
            tokens.push(next);
            if next == EOS || tokens.len() == max_new {
                break;
            }
            if session.len() >= c.max_seq {
                truncated = true;
                break;
            }
            out = session.feed(&[next], hooks)?;
        }
        Ok((tokens, truncated, steps))
    }
}

/// Incremental decoder state. Feeding tokens one at a time gives the same
/// bits as one call over the whole sequence.
#[derive(Debug)]
pub struct DecoderSession<'m> {
    model: &'m ToyLvlm,
    kv: Vec<KvCache<f32>>,
    len: usize,
}

struct RunOutput {
    states: Vec<f32>,
    shifted: Vec<f32>,
    attention: Vec<f32>,
    x: Vec<f32>,
    n_keys: usize,
}

impl DecoderSession<'_> {
    /// Total positions processed, vision prefix included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `tokens`; `Newest` hooks act on the last of them.
    pub fn feed(&mut self, tokens: &[Token], hooks: &HookSet) -> Result<DecoderTrace> {
        let c = self.model.config();
        if tokens.is_empty() {
            return Err(VtiError::Generation("empty token prefix".into()));
        }
        let total = self.len + tokens.len();
        if total > c.max_seq {
            return Err(VtiError::Length {
                len: total,
                max: c.max_seq,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(VtiError::Generation(format!("token {t} outside vocabulary")));
        }
        let p = &self.model.params;
        let lay = &p.layout;
        let dd = c.dec_width;
        let tok = p.get(&lay.tok);
        let pos = p.get(&lay.dec_pos);
        let mut x = Vec::with_capacity(tokens.len() * dd);
        for (i, &t) in tokens.iter().enumerate() {
            let e = &tok[t as usize * dd..(t as usize + 1) * dd];
            let q = &pos[(self.len + i) * dd..(self.len + i + 1) * dd];
            x.extend(e.iter().zip(q).map(|(a, b)| a + b));
        }
        let n = tokens.len();
        let run = self.run(x, hooks, true);
        let (h, _, _) = layer_norm_rows(&run.x, p.get(&lay.dec_lnf_g), p.get(&lay.dec_lnf_b), LN_EPS);
        let mut logits = vec![0.0f32; n * c.vocab_size];
        matmul_acc(&mut logits, &h, p.get(&lay.head_w), n, dd, c.vocab_size);
        let ld = c.dec_layers;
        Ok(DecoderTrace {
            states: Tensor::from_parts_unchecked(vec![ld, n, dd], run.states),
            shifted: Tensor::from_parts_unchecked(vec![ld, n, dd], run.shifted),
            attention: Tensor::from_parts_unchecked(vec![ld, c.dec_heads, n, run.n_keys], run.attention),
            logits: Tensor::from_parts_unchecked(vec![n, c.vocab_size], logits),
        })
    }

    fn run(&mut self, mut x: Vec<f32>, hooks: &HookSet, newest: bool) -> RunOutput {
        let p = &self.model.params;
        let dd = self.model.config().dec_width;
        let first = self.len;
        let mut states = Vec::new();
        let mut shifted = Vec::new();
        let mut attention = Vec::new();
        let mut n_keys = 0;
        for (l, b) in p.layout.dec_blocks.iter().enumerate() {
            let (mut y, cache) = block_forward(p, b, &x, &mut self.kv[l], Visibility::Causal, first);
            states.extend_from_slice(&y);
            hooks.at(HookSite::Decoder(l)).apply(&mut y, dd, first, newest);
            shifted.extend_from_slice(&y);
            attention.extend_from_slice(&cache.probs);
            n_keys = cache.n_keys;
            x = y;
        }
        self.len += x.len() / dd;
        RunOutput {
            states,
            shifted,
            attention,
            x,
            n_keys,
        }
    }
}

fn newest_step(out: &DecoderTrace, c: &ModelConfig) -> StepTrace {
    let [ld, heads, n, k] = *out.attention.shape() else {
        unreachable!("attention is rank 4")
    };
    let dd = c.dec_width;
    let mut attention = Vec::with_capacity(ld * heads * k);
    let mut states = Vec::with_capacity(ld * dd);
    for l in 0..ld {
        for h in 0..heads {
            attention.extend_from_slice(out.attention.slice(&[l, h, n - 1]));
        }
        states.extend_from_slice(out.states.slice(&[l, n - 1]));
    }
    StepTrace {
        attention: Tensor::from_parts_unchecked(vec![ld, heads, k], attention),
        states: Tensor::from_parts_unchecked(vec![ld, dd], states),
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_image(c: &ModelConfig, image: &Image) -> Result<()> {
    if image.height() != c.image_size || image.width() != c.image_size {
        return Err(VtiError::dim(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            c.image_size,
            c.image_size
        )));
    }
    Ok(())
}

/// Patch rows in raster order of the patch grid, each flattened as
/// `(py, px, channel)`.
pub(crate) fn patchify<S: Real>(c: &ModelConfig, pixels: &[f32]) -> Vec<S> {
    let (size, ps) = (c.image_size, c.patch_size);
    let g = size / ps;
    let mut out = Vec::with_capacity(g * g * c.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..ps {
                let row = (gy * ps + py) * size + gx * ps;
                let start = row * CHANNELS;
                out.extend(pixels[start..start + ps * CHANNELS].iter().map(|&v| S::lift(v)));
            }
        }
    }
    out
}

/// Patch embedding plus positions, the encoder input `[T, D_v]`.
pub(crate) fn embed_patches<S: Real>(p: &Params<S>, pixels: &[f32]) -> Vec<S> {
    let c = p.config();
    let lay = &p.layout;
    let patches = patchify::<S>(&c, pixels);
    let mut x = matmul(&patches, p.get(&lay.patch_w), c.vision_tokens(), c.patch_dim(), c.enc_width);
    add_row_bias(&mut x, p.get(&lay.patch_b));
    for (v, &q) in x.iter_mut().zip(p.get(&lay.enc_pos)) {
        *v += q;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::hooks::{Hook, Positions};

    fn model() -> ToyLvlm {
        ToyLvlm::init(ModelConfig::tiny(), 3).unwrap()
    }

    fn image(seed: u32) -> Image {
        let data = (0..8 * 8 * 3)
            .map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 1000.0)
            .collect();
        Image::new(8, 8, data).unwrap()
    }

    #[test]
    fn incremental_feed_matches_one_shot() {
        let m = model();
        let (emb, _) = m.encode_image(&image(1), &HookSet::new()).unwrap();
        let tokens = [1, 3, 6, 7, 9];
        let (_, full) = m.decode_step(&emb, &tokens, &HookSet::new()).unwrap();
        let mut s = m.session(&emb, &HookSet::new()).unwrap();
        for (i, &t) in tokens.iter().enumerate() {
            let step = s.feed(&[t], &HookSet::new()).unwrap();
            assert_eq!(step.logits.data(), full.logits.slice(&[i]));
        }
    }

    #[test]
    fn recorded_state_plus_delta_is_what_the_next_layer_sees() {
        let m = model();
        let d = Tensor::new(vec![8], (0..8).map(|i| i as f32 * 0.1).collect()).unwrap();
        let hooks = HookSet::new().with(Hook::new(HookSite::Vision(1), Positions::All, 1.0, d.clone()));
        let (_, tr) = m.encode_image(&image(2), &hooks).unwrap();
        let rec = tr.states.slice(&[1]);
        let sh = tr.shifted.slice(&[1]);
        for (i, (&a, &b)) in rec.iter().zip(sh).enumerate() {
            assert_eq!(a + d.data()[i % 8], b);
        }
        assert_eq!(tr.states.slice(&[0]), tr.shifted.slice(&[0]));
    }

    #[test]
    fn overflow_is_a_length_error() {
        let m = model();
        let (emb, _) = m.encode_image(&image(3), &HookSet::new()).unwrap();
        let long = vec![1; 13];
        assert!(matches!(
            m.decode_step(&emb, &long, &HookSet::new()),
            Err(VtiError::Length { len: 17, max: 16 })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
    }
}
