use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VtiError};

/// How hallucinated objects are counted for `chair_i`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentionCounting {
    /// Every mention counts, repeats included.
    #[default]
    Mentions,
    /// Each object counts once per generation.
    Unique,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    /// Set when a ratio had an empty denominator and was reported as 0.
    pub no_sentences: bool,
    pub no_mentions: bool,
    pub no_ground_truth: bool,
}

/// `generations[g][s]` lists the objects mentioned in sentence `s` of
/// generation `g`; `ground_truth[g]` is the set actually present.
pub fn chair_scores(generations: &[Vec<Vec<usize>>], ground_truth: &[BTreeSet<usize>]) -> Result<ChairScores> {
    chair_scores_with(generations, ground_truth, MentionCounting::Mentions)
}

pub fn chair_scores_with(
    generations: &[Vec<Vec<usize>>],
    ground_truth: &[BTreeSet<usize>],
    counting: MentionCounting,
) -> Result<ChairScores> {
    if generations.len() != ground_truth.len() {
        return Err(VtiError::dim(format!(
            "{} generations but {} ground-truth sets",
            generations.len(),
            ground_truth.len()
        )));
    }
    let (mut sentences, mut bad_sentences) = (0usize, 0usize);
    let (mut mentions, mut bad_mentions) = (0usize, 0usize);
    let (mut truth, mut found) = (0usize, 0usize);
    for (gen, gt) in generations.iter().zip(ground_truth) {
        let mut seen = BTreeSet::new();
        for sentence in gen {
            sentences += 1;
            if sentence.iter().any(|o| !gt.contains(o)) {
                bad_sentences += 1;
            }
            for o in sentence {
                if counting == MentionCounting::Unique && !seen.insert(*o) {
                    continue;
                }
                mentions += 1;
                if !gt.contains(o) {
                    bad_mentions += 1;
                }
            }
        }
        let said: BTreeSet<usize> = gen.iter().flatten().copied().collect();
        truth += gt.len();
        found += gt.intersection(&said).count();
    }
    Ok(ChairScores {
        chair_s: ratio(bad_sentences, sentences),
        chair_i: ratio(bad_mentions, mentions),
        recall: ratio(found, truth),
        no_sentences: sentences == 0,
        no_mentions: mentions == 0,
        no_ground_truth: truth == 0,
    })
}

pub(crate) fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
