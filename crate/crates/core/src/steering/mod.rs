//! Steering directions: extraction from perturbation-averaged and
//! caption-paired hidden states, and their application as model hooks.

mod io;

pub use io::{decode_vtid, encode_vtid, read_vtid, write_vtid, VTID_MAGIC, VTID_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VtiError};
use crate::model::{Hook, HookSet, HookSite, ModelConfig, Positions, ToyLvlm};
use crate::numerics::{principal_direction, DeltaMatrix, Tensor};
use crate::perturb::{make_mask_set, perturb, Image, PerturbationSpec, DEFAULT_MASK_RATIO};
use crate::rng::derive_seed;
use crate::scenes::{caption_prompt, CaptionPair};
use crate::vocab::Token;

pub const DEFAULT_EXAMPLES: usize = 50;
pub const DEFAULT_MASKS: usize = 50;
/// Strengths for open-ended captioning.
pub const CAPTION_ALPHA: f64 = 0.2;
pub const CAPTION_BETA: f64 = 0.4;
/// Strengths for every other task.
pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_BETA: f64 = 0.9;

/// Mask parameters for visual delta extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskOptions {
    pub masks: usize,
    pub mask_ratio: f64,
    pub patch_size: usize,
    pub seed: u64,
}

impl MaskOptions {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        MaskOptions {
            masks: DEFAULT_MASKS,
            mask_ratio: DEFAULT_MASK_RATIO,
            patch_size: config.patch_size,
            seed,
        }
    }
}

/// Mean encoder states over `masks` masked copies of `image`, minus the
/// clean states, `[L_v, T, D_v]`. Averaging is in `f64`.
pub fn visual_delta(model: &ToyLvlm, image: &Image, opts: &MaskOptions) -> Result<Tensor> {
    let masks = make_mask_set(
        image.height(),
        image.width(),
        opts.mask_ratio,
        opts.patch_size,
        opts.masks,
        opts.seed,
    )?;
    let none = HookSet::new();
    let (_, clean) = model.encode_image(image, &none)?;
    let mut sum = vec![0.0f64; clean.states.len()];
    for mask in &masks {
        let (_, trace) = model.encode_image(&mask.apply(image)?, &none)?;
        for (s, &v) in sum.iter_mut().zip(trace.states.data()) {
            *s += f64::from(v);
        }
    }
    let m = masks.len() as f64;
    let delta = sum
        .iter()
        .zip(clean.states.data())
        .map(|(&s, &c)| (s / m - f64::from(c)) as f32)
        .collect();
    Tensor::new(clean.states.shape().to_vec(), delta)
}

/// Per-`(layer, token)` principal direction of the visual deltas of
/// `images`. Image `i` uses mask seed `derive_seed(opts.seed, i)`. Returns
/// `[L_v, T, D_v]` and the `(layer, token)` slices that were degenerate and
/// left at zero.
pub fn extract_vision_directions(
    model: &ToyLvlm,
    images: &[Image],
    opts: &MaskOptions,
) -> Result<(Tensor, Vec<(usize, usize)>)> {
    if images.len() < 2 {
        return Err(VtiError::InsufficientSamples {
            needed: 2,
            got: images.len(),
        });
    }
    let c = model.config();
    let (l, t, d) = (c.enc_layers, c.vision_tokens(), c.enc_width);
    let deltas = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let o = MaskOptions {
                seed: derive_seed(opts.seed, i as u64),
                ..*opts
            };
            visual_delta(model, img, &o)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0f32; l * t * d];
    let mut degenerate = Vec::new();
    for li in 0..l {
        for ti in 0..t {
            let rows: Vec<f32> = deltas.iter().flat_map(|x| x.slice(&[li, ti]).iter().copied()).collect();
            let slot = &mut out[(li * t + ti) * d..(li * t + ti + 1) * d];
            if !fill_direction(slot, rows, images.len(), d)? {
                degenerate.push((li, ti));
            }
        }
    }
    Ok((Tensor::new(vec![l, t, d], out)?, degenerate))
}

/// Decoder states at the last position of `prompt ‖ caption`, `[L_d, D_d]`.
pub fn caption_final_states(model: &ToyLvlm, image: &Image, caption: &[Token]) -> Result<Tensor> {
    let none = HookSet::new();
    let (emb, _) = model.encode_image(image, &none)?;
    let mut tokens = caption_prompt();
    tokens.extend_from_slice(caption);
    let (_, trace) = model.decode_step(&emb, &tokens, &none)?;
    let c = model.config();
    let (l, s, d) = (c.dec_layers, tokens.len(), c.dec_width);
    let mut out = Vec::with_capacity(l * d);
    for li in 0..l {
        out.extend_from_slice(trace.states.slice(&[li, s - 1]));
    }
    Tensor::new(vec![l, d], out)
}

/// Per-layer principal direction of clean-minus-hallucinated final states.
/// Returns `[L_d, D_d]` and the degenerate layers.
pub fn extract_text_directions(model: &ToyLvlm, pairs: &[CaptionPair]) -> Result<(Tensor, Vec<usize>)> {
    if pairs.len() < 2 {
        return Err(VtiError::InsufficientSamples {
            needed: 2,
            got: pairs.len(),
        });
    }
    let c = model.config();
    let (l, d) = (c.dec_layers, c.dec_width);
    let mut deltas = Vec::with_capacity(pairs.len());
    for p in pairs {
        let image = p.image();
        let clean = caption_final_states(model, &image, &p.clean)?;
        let bad = caption_final_states(model, &image, &p.hallucinated)?;
        let delta: Vec<f32> = clean.data().iter().zip(bad.data()).map(|(a, b)| a - b).collect();
        deltas.push(delta);
    }
    let mut out = vec![0.0f32; l * d];
    let mut degenerate = Vec::new();
    for li in 0..l {
        let rows: Vec<f32> = deltas.iter().flat_map(|x| x[li * d..(li + 1) * d].iter().copied()).collect();
        if !fill_direction(&mut out[li * d..(li + 1) * d], rows, pairs.len(), d)? {
            degenerate.push(li);
        }
    }
    Ok((Tensor::new(vec![l, d], out)?, degenerate))
}

/// Writes the unit direction of `rows` into `slot`; `false` if degenerate.
fn fill_direction(slot: &mut [f32], rows: Vec<f32>, n: usize, d: usize) -> Result<bool> {
    match principal_direction(&DeltaMatrix::new(Tensor::new(vec![n, d], rows)?)?) {
        Ok(dir) => {
            slot.copy_from_slice(&dir.to_f32());
            Ok(true)
        }
        Err(VtiError::Degenerate(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

/// How a [`SteeringSet`] was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringMeta {
    pub examples: usize,
    pub masks: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    pub checkpoint: String,
    pub degenerate_vision: Vec<(usize, usize)>,
    pub degenerate_text: Vec<usize>,
}

/// Extracted directions plus default strengths.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringSet {
    /// `[L_v, T, D_v]`, each `(l, t)` slice unit-norm or zero.
    pub vision: Tensor,
    /// `[L_d, D_d]`, each layer unit-norm or zero.
    pub text: Tensor,
    pub alpha: f64,
    pub beta: f64,
    pub meta: SteeringMeta,
}

impl SteeringSet {
    /// Runs both extractions: visual deltas on the pair images, text deltas
    /// on the captions.
    pub fn extract(model: &ToyLvlm, pairs: &[CaptionPair], opts: &MaskOptions, checkpoint: String) -> Result<Self> {
        let images: Vec<Image> = pairs.iter().map(CaptionPair::image).collect();
        let (vision, degenerate_vision) = extract_vision_directions(model, &images, opts)?;
        let (text, degenerate_text) = extract_text_directions(model, pairs)?;
        Ok(SteeringSet {
            vision,
            text,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            meta: SteeringMeta {
                examples: pairs.len(),
                masks: opts.masks,
                mask_ratio: opts.mask_ratio,
                seed: opts.seed,
                checkpoint,
                degenerate_vision,
                degenerate_text,
            },
        })
    }

    /// Checks shapes against `config` and the unit-or-zero rule.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let want_v = [config.enc_layers, config.vision_tokens(), config.enc_width];
        let want_t = [config.dec_layers, config.dec_width];
        if self.vision.shape() != want_v || self.text.shape() != want_t {
            return Err(VtiError::Hook(format!(
                "directions {:?}/{:?} do not fit the model ({want_v:?}/{want_t:?})",
                self.vision.shape(),
                self.text.shape()
            )));
        }
        for (name, t, d) in [("vision", &self.vision, config.enc_width), ("text", &self.text, config.dec_width)] {
            for (i, slice) in t.data().chunks_exact(d).enumerate() {
                let norm = slice.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
                if norm != 0.0 && (norm - 1.0).abs() > 1e-6 {
                    return Err(VtiError::Hook(format!("{name} slice {i} has norm {norm}")));
                }
            }
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(VtiError::Hook("strengths must be non-negative".into()));
        }
        Ok(())
    }

    /// Hooks at the stored strengths.
    pub fn make_hooks(&self, config: &ModelConfig) -> Result<HookSet> {
        self.hooks_at(config, self.alpha, self.beta)
    }

    /// Vision hooks add `alpha * d[l, t]` at every encoder layer and token;
    /// text hooks add `beta * d[l]` at the newest position of every decoder
    /// layer on every step.
    pub fn hooks_at(&self, config: &ModelConfig, alpha: f64, beta: f64) -> Result<HookSet> {
        self.validate(config)?;
        let mut set = HookSet::new();
        let (t, dv) = (config.vision_tokens(), config.enc_width);
        for l in 0..config.enc_layers {
            let dir = Tensor::new(vec![t, dv], self.vision.slice(&[l]).to_vec())?;
            set.push(Hook::new(HookSite::Vision(l), Positions::All, alpha as f32, dir));
        }
        for l in 0..config.dec_layers {
            let dir = Tensor::new(vec![config.dec_width], self.text.slice(&[l]).to_vec())?;
            set.push(Hook::new(HookSite::Decoder(l), Positions::Newest, beta as f32, dir));
        }
        set.validate(config)?;
        Ok(set)
    }
}

/// Mean projector output over `m` perturbed copies of `image`; copy `j`
/// uses `spec.reseeded(derive_seed(spec.seed, j))`.
pub fn averaged_features_baseline(model: &ToyLvlm, image: &Image, spec: &PerturbationSpec, m: usize) -> Result<Tensor> {
    if m == 0 {
        return Err(VtiError::InsufficientSamples { needed: 1, got: 0 });
    }
    let none = HookSet::new();
    let mut sum: Vec<f64> = Vec::new();
    let mut shape = Vec::new();
    for j in 0..m {
        let noisy = perturb(image, &spec.reseeded(derive_seed(spec.seed, j as u64)))?;
        let (emb, _) = model.encode_image(&noisy, &none)?;
        if sum.is_empty() {
            sum = vec![0.0; emb.len()];
            shape = emb.shape().to_vec();
        }
        for (s, &v) in sum.iter_mut().zip(emb.data()) {
            *s += f64::from(v);
        }
    }
    Tensor::new(shape, sum.iter().map(|&s| (s / m as f64) as f32).collect())
}
