//! Flat parameter storage with a fixed, documented tensor order.
//!
//! The order below is also the checkpoint order:
//!
//! ```text
//! enc.patch.w [P, Dv]   enc.patch.b [Dv]   enc.pos [T, Dv]
//! per encoder layer l:  enc.{l}.ln1.g  enc.{l}.ln1.b  enc.{l}.qkv.w [Dv, 3Dv]  enc.{l}.qkv.b
//!                       enc.{l}.out.w [Dv, Dv]  enc.{l}.out.b  enc.{l}.ln2.g  enc.{l}.ln2.b
//!                       enc.{l}.fc1.w [Dv, rDv]  enc.{l}.fc1.b  enc.{l}.fc2.w [rDv, Dv]  enc.{l}.fc2.b
//! enc.ln_f.g  enc.ln_f.b  proj.w [Dv, Dd]  proj.b [Dd]
//! dec.tok [V, Dd]  dec.pos [max_seq, Dd]
//! per decoder layer l:  dec.{l}.* (same twelve tensors, width Dd)
//! dec.ln_f.g  dec.ln_f.b  dec.head.w [Dd, V]
//! ```

use std::ops::Range;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::numerics::Real;
use crate::rng;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

/// Offsets of one transformer block's tensors.
#[derive(Debug, Clone)]
pub(crate) struct BlockOffsets {
    pub width: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub fc1_w: Range<usize>,
    pub fc1_b: Range<usize>,
    pub fc2_w: Range<usize>,
    pub fc2_b: Range<usize>,
}

#[derive(Debug)]
pub struct ParamLayout {
    pub(crate) config: ModelConfig,
    entries: Vec<ParamEntry>,
    total: usize,
    pub(crate) patch_w: Range<usize>,
    pub(crate) patch_b: Range<usize>,
    pub(crate) enc_pos: Range<usize>,
    pub(crate) enc_blocks: Vec<BlockOffsets>,
    pub(crate) enc_lnf_g: Range<usize>,
    pub(crate) enc_lnf_b: Range<usize>,
    pub(crate) proj_w: Range<usize>,
    pub(crate) proj_b: Range<usize>,
    pub(crate) tok: Range<usize>,
    pub(crate) dec_pos: Range<usize>,
    pub(crate) dec_blocks: Vec<BlockOffsets>,
    pub(crate) dec_lnf_g: Range<usize>,
    pub(crate) dec_lnf_b: Range<usize>,
    pub(crate) head_w: Range<usize>,
}

struct Builder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let n: usize = shape.iter().product();
        let range = self.total..self.total + n;
        self.total += n;
        self.entries.push(ParamEntry {
            name,
            shape,
            range: range.clone(),
        });
        range
    }

    fn block(&mut self, prefix: &str, width: usize, heads: usize, ratio: usize) -> BlockOffsets {
        let hidden = width * ratio;
        BlockOffsets {
            width,
            heads,
            hidden,
            ln1_g: self.push(format!("{prefix}.ln1.g"), vec![width]),
            ln1_b: self.push(format!("{prefix}.ln1.b"), vec![width]),
            qkv_w: self.push(format!("{prefix}.qkv.w"), vec![width, 3 * width]),
            qkv_b: self.push(format!("{prefix}.qkv.b"), vec![3 * width]),
            out_w: self.push(format!("{prefix}.out.w"), vec![width, width]),
            out_b: self.push(format!("{prefix}.out.b"), vec![width]),
            ln2_g: self.push(format!("{prefix}.ln2.g"), vec![width]),
            ln2_b: self.push(format!("{prefix}.ln2.b"), vec![width]),
            fc1_w: self.push(format!("{prefix}.fc1.w"), vec![width, hidden]),
            fc1_b: self.push(format!("{prefix}.fc1.b"), vec![hidden]),
            fc2_w: self.push(format!("{prefix}.fc2.w"), vec![hidden, width]),
            fc2_b: self.push(format!("{prefix}.fc2.b"), vec![width]),
        }
    }
}

impl ParamLayout {
    pub fn new(config: ModelConfig) -> Self {
        let c = config;
        let (dv, dd) = (c.enc_width, c.dec_width);
        let mut b = Builder {
            entries: Vec::new(),
            total: 0,
        };
        let patch_w = b.push("enc.patch.w".into(), vec![c.patch_dim(), dv]);
        let patch_b = b.push("enc.patch.b".into(), vec![dv]);
        let enc_pos = b.push("enc.pos".into(), vec![c.vision_tokens(), dv]);
        let enc_blocks = (0..c.enc_layers)
            .map(|l| b.block(&format!("enc.{l}"), dv, c.enc_heads, c.mlp_ratio))
            .collect();
        let enc_lnf_g = b.push("enc.ln_f.g".into(), vec![dv]);
        let enc_lnf_b = b.push("enc.ln_f.b".into(), vec![dv]);
        let proj_w = b.push("proj.w".into(), vec![dv, dd]);
        let proj_b = b.push("proj.b".into(), vec![dd]);
        let tok = b.push("dec.tok".into(), vec![c.vocab_size, dd]);
        let dec_pos = b.push("dec.pos".into(), vec![c.max_seq, dd]);
        let dec_blocks = (0..c.dec_layers)
            .map(|l| b.block(&format!("dec.{l}"), dd, c.dec_heads, c.mlp_ratio))
            .collect();
        let dec_lnf_g = b.push("dec.ln_f.g".into(), vec![dd]);
        let dec_lnf_b = b.push("dec.ln_f.b".into(), vec![dd]);
        let head_w = b.push("dec.head.w".into(), vec![dd, c.vocab_size]);
        ParamLayout {
            config,
            entries: b.entries,
            total: b.total,
            patch_w,
            patch_b,
            enc_pos,
            enc_blocks,
            enc_lnf_g,
            enc_lnf_b,
            proj_w,
            proj_b,
            tok,
            dec_pos,
            dec_blocks,
            dec_lnf_g,
            dec_lnf_b,
            head_w,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    /// Tensors that are layer-norm gains (initialized to one).
    fn is_gain(name: &str) -> bool {
        name.ends_with(".g")
    }

    fn is_bias(name: &str) -> bool {
        name.ends_with(".b")
    }
}

/// Parameter values (or gradients) in layout order.
#[derive(Debug, Clone)]
pub struct Params<S> {
    pub(crate) layout: Arc<ParamLayout>,
    pub(crate) data: Vec<S>,
}

impl<S: Real> Params<S> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![S::zero(); layout.total()];
        Params { layout, data }
    }

    /// Weights and embeddings ~ N(0, 0.02^2); biases 0; layer-norm gains 1.
    pub fn init(layout: Arc<ParamLayout>, seed: u64) -> Self {
        let mut p = Params::zeros(layout.clone());
        let normal = Normal::new(0.0f32, INIT_STD as f32).expect("valid std");
        for (i, e) in layout.entries().iter().enumerate() {
            let slice = &mut p.data[e.range.clone()];
            if ParamLayout::is_gain(&e.name) {
                slice.fill(S::one());
            } else if !ParamLayout::is_bias(&e.name) {
                let mut r = rng::stream(seed, i as u64);
                for v in slice {
                    *v = S::lift(normal.sample(&mut r));
                }
            }
        }
        p
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn get(&self, r: &Range<usize>) -> &[S] {
        &self.data[r.clone()]
    }

    pub(crate) fn get_mut(&mut self, r: &Range<usize>) -> &mut [S] {
        &mut self.data[r.clone()]
    }

    pub fn cast<T: Real>(&self) -> Params<T> {
        Params {
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| T::lift(v.lower())).collect(),
        }
    }

    pub fn config(&self) -> ModelConfig {
        self.layout.config
    }
}
