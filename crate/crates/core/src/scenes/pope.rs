use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BiasSpec, ObjectCounts, Scene, NUM_COLORS, NUM_SHAPES};
use crate::error::{Result, VtiError};
use crate::rng;
use crate::vocab::{self, Token, A, BOS, IS, QUESTION, THERE};

/// How negative (absent) objects are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopeMode {
    Random,
    Popular,
    Adversarial,
}

impl PopeMode {
    pub const ALL: [PopeMode; 3] = [PopeMode::Random, PopeMode::Popular, PopeMode::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            PopeMode::Random => "random",
            PopeMode::Popular => "popular",
            PopeMode::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for PopeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PopeMode {
    type Err = VtiError;

    fn from_str(s: &str) -> Result<Self> {
        PopeMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| VtiError::config("pope.mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub color: usize,
    pub shape: usize,
    pub gold: bool,
}

impl PopeQuestion {
    /// `<bos> is there a {color} {shape} ?`
    pub fn prompt(&self) -> Vec<Token> {
        vec![BOS, IS, THERE, A, vocab::color_token(self.color), vocab::shape_token(self.shape), QUESTION]
    }

    pub fn answer(&self) -> Token {
        if self.gold {
            vocab::YES
        } else {
            vocab::NO
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeSet {
    pub questions: Vec<PopeQuestion>,
    /// Some negatives came from random sampling because the mode had too few.
    pub fallback: bool,
}

/// `ceil(k/2)` questions about present objects and `floor(k/2)` about
/// objects whose shape is absent, shuffled with `seed`.
pub fn pope_questions(
    scene: &Scene,
    mode: PopeMode,
    bias: &BiasSpec,
    k: usize,
    counts: &ObjectCounts,
    seed: u64,
) -> Result<PopeSet> {
    if k == 0 {
        return Err(VtiError::Size("need at least one question".into()));
    }
    let n_pos = k.div_ceil(2);
    let n_neg = k / 2;
    if scene.objects().is_empty() && n_pos > 0 {
        return Err(VtiError::Size("empty scene has no positive objects".into()));
    }
    let mut r = rng::rng(seed);

    let mut present: Vec<(usize, usize)> = scene.objects().iter().map(|o| (o.color, o.shape)).collect();
    present.shuffle(&mut r);
    let mut questions: Vec<PopeQuestion> = present
        .iter()
        .cycle()
        .take(n_pos)
        .map(|&(color, shape)| PopeQuestion { color, shape, gold: true })
        .collect();

    let absent: Vec<usize> = (0..NUM_SHAPES).filter(|&s| !scene.has_shape(s)).collect();
    let mut negatives: Vec<(usize, usize)> = match mode {
        PopeMode::Random => Vec::new(),
        PopeMode::Popular => counts
            .ranked()
            .into_iter()
            .filter(|&(_, shape)| !scene.has_shape(shape))
            .take(n_neg)
            .collect(),
        PopeMode::Adversarial => bias
            .absent_companions(scene)
            .into_iter()
            .take(n_neg)
            .map(|shape| (r.gen_range(0..NUM_COLORS), shape))
            .collect(),
    };
    let fallback = mode != PopeMode::Random && negatives.len() < n_neg;
    let mut pool = absent.clone();
    pool.retain(|s| !negatives.iter().any(|&(_, t)| t == *s));
    pool.shuffle(&mut r);
    let mut cycle = pool.iter().chain(absent.iter()).cycle();
    while negatives.len() < n_neg {
        let &shape = cycle.next().expect("a scene of at most four objects leaves absent shapes");
        negatives.push((r.gen_range(0..NUM_COLORS), shape));
    }
    questions.extend(negatives.into_iter().map(|(color, shape)| PopeQuestion { color, shape, gold: false }));
    questions.shuffle(&mut r);
    Ok(PopeSet { questions, fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::SceneObject;

    fn counts() -> ObjectCounts {
        let bias = BiasSpec::default();
        ObjectCounts::from_scenes((0..300).map(|s| Scene::random(s, &bias)).collect::<Vec<_>>().iter())
    }

    #[test]
    fn balance_holds_for_every_mode_and_k() {
        let bias = BiasSpec::default();
        let c = counts();
        for seed in 0..50 {
            let s = Scene::random(seed, &bias);
            for mode in PopeMode::ALL {
                for k in 1..9 {
                    let set = pope_questions(&s, mode, &bias, k, &c, seed).unwrap();
                    let pos = set.questions.iter().filter(|q| q.gold).count();
                    assert_eq!(set.questions.len(), k);
                    assert_eq!(pos, k.div_ceil(2));
                    for q in &set.questions {
                        assert_eq!(q.gold, s.has_object(q.shape, q.color));
                        if !q.gold {
                            assert!(!s.has_shape(q.shape));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn adversarial_negatives_are_absent_companions() {
        let bias = BiasSpec::default();
        let c = counts();
        for seed in 0..300 {
            let s = Scene::random(seed, &bias);
            let set = pope_questions(&s, PopeMode::Adversarial, &bias, 2, &c, seed).unwrap();
            let neg = set.questions.iter().find(|q| !q.gold).unwrap();
            if !set.fallback {
                assert!(bias.absent_companions(&s).contains(&neg.shape));
            }
        }
    }

    #[test]
    fn single_object_scene_with_k1_is_all_yes() {
        let s = Scene::new(0, vec![SceneObject { shape: 4, color: 3, cell: 0 }]).unwrap();
        let set = pope_questions(&s, PopeMode::Random, &BiasSpec::default(), 1, &counts(), 0).unwrap();
        assert!(set.questions.iter().all(|q| q.gold));
        assert_eq!(vocab::decode(&set.questions[0].prompt()), "<bos> is there a yellow cross ?");
    }

    #[test]
    fn mode_names_round_trip() {
        for m in PopeMode::ALL {
            assert_eq!(m.name().parse::<PopeMode>().unwrap(), m);
        }
        assert!("often".parse::<PopeMode>().is_err());
    }
}
