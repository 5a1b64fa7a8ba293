use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{caption, caption_of, render_scene, Scene, NUM_COLORS, NUM_SHAPES};
use crate::error::{Result, VtiError};
use crate::perturb::Image;
use crate::rng;
use crate::vocab::{self, Token, AND, A, NOTHING, PERIOD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoPair {
    pub trigger: usize,
    pub companion: usize,
}

/// Co-occurrence bias injected into training captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSpec {
    pub co_pairs: Vec<CoPair>,
    /// Chance that a training caption mentions an absent companion of a
    /// trigger that is present.
    pub p_bias: f64,
    /// Chance that a sampled scene really contains a trigger's companion.
    pub scene_cooccurrence: f64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        let pair = |t: &str, c: &str| CoPair {
            trigger: shape_index(t),
            companion: shape_index(c),
        };
        BiasSpec {
            co_pairs: vec![
                pair("square", "circle"),
                pair("triangle", "diamond"),
                pair("cross", "ring"),
                pair("hbar", "vbar"),
                pair("corner", "dot"),
                pair("frame", "checker"),
            ],
            p_bias: 0.5,
            scene_cooccurrence: 0.25,
        }
    }
}

fn shape_index(name: &str) -> usize {
    vocab::SHAPE_NAMES.iter().position(|&s| s == name).expect("known shape")
}

impl BiasSpec {
    pub fn unbiased() -> Self {
        BiasSpec {
            p_bias: 0.0,
            ..BiasSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_bias", self.p_bias), ("scene_cooccurrence", self.scene_cooccurrence)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(VtiError::config(format!("dataset.bias.{name}"), format!("{p} is outside [0, 1]")));
            }
        }
        for p in &self.co_pairs {
            if p.trigger >= NUM_SHAPES || p.companion >= NUM_SHAPES {
                return Err(VtiError::config("dataset.bias.co_pairs", format!("{p:?} names an unknown shape")));
            }
            if p.trigger == p.companion {
                return Err(VtiError::config("dataset.bias.co_pairs", "companion equals trigger"));
            }
        }
        Ok(())
    }

    pub fn companion(&self, shape: usize) -> Option<usize> {
        self.co_pairs.iter().find(|p| p.trigger == shape).map(|p| p.companion)
    }

    /// Companions of triggers in `scene` whose shape is absent, in pair order.
    pub fn absent_companions(&self, scene: &Scene) -> Vec<usize> {
        let mut out = Vec::new();
        for p in &self.co_pairs {
            if scene.has_shape(p.trigger) && !scene.has_shape(p.companion) && !out.contains(&p.companion) {
                out.push(p.companion);
            }
        }
        out
    }

    /// Training caption: clean, or with probability `p_bias` extended by an
    /// absent companion when one is available.
    pub fn training_caption(&self, scene: &Scene, r: &mut impl Rng) -> Vec<Token> {
        let clean = caption(scene);
        let candidates = self.absent_companions(scene);
        if candidates.is_empty() || !r.gen_bool(self.p_bias) {
            return clean;
        }
        let shape = *candidates.choose(r).expect("nonempty");
        extend_caption(&clean, r.gen_range(0..NUM_COLORS), shape)
    }
}

/// A scene with its clean caption and a version naming one absent object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub scene: Scene,
    pub clean: Vec<Token>,
    pub hallucinated: Vec<Token>,
    /// `(color, shape)` of the injected objects.
    pub injected: Vec<(usize, usize)>,
}

impl CaptionPair {
    pub fn image(&self) -> Image {
        render_scene(&self.scene)
    }
}

/// Appends one absent object: a bias companion of a present trigger when
/// possible, otherwise a random absent shape.
pub fn hallucinated_caption(scene: &Scene, bias: &BiasSpec, seed: u64) -> Result<CaptionPair> {
    let mut r = rng::rng(seed);
    let mut candidates = bias.absent_companions(scene);
    if candidates.is_empty() {
        candidates = (0..NUM_SHAPES).filter(|&s| !scene.has_shape(s)).collect();
    }
    let &shape = candidates
        .choose(&mut r)
        .ok_or_else(|| VtiError::Generation("scene leaves no absent object to inject".into()))?;
    let color = r.gen_range(0..NUM_COLORS);
    let clean = caption(scene);
    Ok(CaptionPair {
        scene: scene.clone(),
        hallucinated: extend_caption(&clean, color, shape),
        clean,
        injected: vec![(color, shape)],
    })
}

fn extend_caption(clean: &[Token], color: usize, shape: usize) -> Vec<Token> {
    if clean == [NOTHING, PERIOD] {
        return caption_of([(color, shape)]);
    }
    let mut out = clean[..clean.len() - 1].to_vec();
    out.extend([AND, A, vocab::color_token(color), vocab::shape_token(shape), PERIOD]);
    out
}
