//! Synthetic scenes of colored shapes on a 4x4 grid, their canonical
//! captions, co-occurrence bias and existence probes.

mod bias;
mod dataset;
mod pope;
mod render;

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtiError};
use crate::rng;
use crate::vocab::{self, Token, AND, A, BOS, DESCRIBE, NOTHING, PERIOD};

pub use bias::{hallucinated_caption, BiasSpec, CaptionPair, CoPair};
pub use dataset::{
    build_dataset, read_manifest, training_examples, write_manifest, Dataset, DatasetSpec,
    ManifestRecord, ObjectCounts, Split,
};
pub use pope::{pope_questions, PopeMode, PopeQuestion, PopeSet};
pub use render::{render_scene, shape_bitmap, BACKGROUND, CANVAS, CELL, COLOR_RGB};

pub const GRID: usize = 4;
pub const NUM_CELLS: usize = GRID * GRID;
pub const MAX_OBJECTS: usize = 4;
pub use vocab::{NUM_COLORS, NUM_SHAPES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    /// Row-major cell index in `0..16`.
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    /// Kept sorted by cell.
    objects: Vec<SceneObject>,
}

impl Scene {
    /// Validates and sorts the objects into canonical (cell) order.
    pub fn new(seed: u64, mut objects: Vec<SceneObject>) -> Result<Self> {
        if objects.len() > MAX_OBJECTS {
            return Err(VtiError::Size(format!("{} objects, at most {MAX_OBJECTS}", objects.len())));
        }
        objects.sort_by_key(|o| o.cell);
        let mut cells = BTreeSet::new();
        let mut kinds = BTreeSet::new();
        for o in &objects {
            if o.shape >= NUM_SHAPES || o.color >= NUM_COLORS || o.cell >= NUM_CELLS {
                return Err(VtiError::Size(format!("object {o:?} out of range")));
            }
            if !cells.insert(o.cell) {
                return Err(VtiError::Size(format!("two objects in cell {}", o.cell)));
            }
            if !kinds.insert((o.shape, o.color)) {
                return Err(VtiError::Size(format!("duplicate object {:?}", (o.shape, o.color))));
            }
        }
        Ok(Scene { seed, objects })
    }

    pub fn empty(seed: u64) -> Self {
        Scene {
            seed,
            objects: Vec::new(),
        }
    }

    /// A random scene of 1 to 4 objects. Each trigger present pulls in its
    /// companion with probability `bias.scene_cooccurrence`.
    pub fn random(seed: u64, bias: &BiasSpec) -> Self {
        let mut r = rng::rng(seed);
        let target = r.gen_range(1..=MAX_OBJECTS);
        let mut shapes: Vec<usize> = Vec::new();
        while shapes.len() < target {
            let s = r.gen_range(0..NUM_SHAPES);
            if shapes.contains(&s) {
                continue;
            }
            shapes.push(s);
            if let Some(c) = bias.companion(s) {
                if shapes.len() < MAX_OBJECTS && !shapes.contains(&c) && r.gen_bool(bias.scene_cooccurrence) {
                    shapes.push(c);
                }
            }
        }
        let cells = rand::seq::index::sample(&mut r, NUM_CELLS, shapes.len());
        let objects = shapes
            .iter()
            .zip(cells.iter())
            .map(|(&shape, cell)| SceneObject {
                shape,
                color: r.gen_range(0..NUM_COLORS),
                cell,
            })
            .collect();
        Scene::new(seed, objects).expect("random scenes are valid")
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn has_shape(&self, shape: usize) -> bool {
        self.objects.iter().any(|o| o.shape == shape)
    }

    pub fn has_object(&self, shape: usize, color: usize) -> bool {
        self.objects.iter().any(|o| o.shape == shape && o.color == color)
    }

    pub fn shapes(&self) -> BTreeSet<usize> {
        self.objects.iter().map(|o| o.shape).collect()
    }
}

/// Prompt that asks for a caption.
pub fn caption_prompt() -> Vec<Token> {
    vec![BOS, DESCRIBE]
}

/// Canonical caption: `a {color} {shape} and a ... .`, objects in cell order.
pub fn caption(scene: &Scene) -> Vec<Token> {
    caption_of(scene.objects.iter().map(|o| (o.color, o.shape)))
}

pub(crate) fn caption_of(objects: impl IntoIterator<Item = (usize, usize)>) -> Vec<Token> {
    let mut out = Vec::new();
    for (i, (color, shape)) in objects.into_iter().enumerate() {
        if i > 0 {
            out.push(AND);
        }
        out.extend([A, vocab::color_token(color), vocab::shape_token(shape)]);
    }
    if out.is_empty() {
        out.push(NOTHING);
    }
    out.push(PERIOD);
    out
}

/// Inverse of [`caption`]: the `(color, shape)` list of a well-formed caption.
pub fn parse_caption(tokens: &[Token]) -> Result<Vec<(usize, usize)>> {
    let bad = || VtiError::Generation(format!("not a caption: `{}`", vocab::decode(tokens)));
    if tokens == [NOTHING, PERIOD] {
        return Ok(Vec::new());
    }
    let (&last, body) = tokens.split_last().ok_or_else(bad)?;
    if last != PERIOD {
        return Err(bad());
    }
    let mut out = Vec::new();
    for clause in body.split(|&t| t == AND) {
        match *clause {
            [a, c, s] if a == A => {
                let color = vocab::as_color(c).ok_or_else(bad)?;
                let shape = vocab::as_shape(s).ok_or_else(bad)?;
                out.push((color, shape));
            }
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

/// One object mention found in free text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mention {
    pub shape: usize,
    /// Color word directly before the shape, if any.
    pub color: Option<usize>,
}

/// Shape mentions grouped by sentence (split on `.`, EOS removed). A
/// trailing unterminated sentence counts if it is nonempty.
pub fn mentions_by_sentence(tokens: &[Token]) -> Vec<Vec<Mention>> {
    let tokens = match tokens.iter().position(|&t| t == vocab::EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    };
    let mut out = Vec::new();
    for sentence in tokens.split(|&t| t == PERIOD) {
        if sentence.is_empty() {
            continue;
        }
        let mut m = Vec::new();
        for (i, &t) in sentence.iter().enumerate() {
            if let Some(shape) = vocab::as_shape(t) {
                let color = i.checked_sub(1).and_then(|j| vocab::as_color(sentence[j]));
                m.push(Mention { shape, color });
            }
        }
        out.push(m);
    }
    out
}
