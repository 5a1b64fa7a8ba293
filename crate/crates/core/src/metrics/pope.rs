use serde::{Deserialize, Serialize};

use super::chair::ratio;
use crate::error::{Result, VtiError};
use crate::vocab::{Token, NO, YES};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Answers with no yes/no token; scored as wrong.
    pub unparseable: usize,
    pub undefined_precision: bool,
    pub undefined_recall: bool,
}

/// First yes/no token of an answer.
pub fn parse_answer(tokens: &[Token]) -> Option<bool> {
    tokens.iter().find_map(|&t| match t {
        YES => Some(true),
        NO => Some(false),
        _ => None,
    })
}

/// Binary scores with "yes" as the positive class.
pub fn pope_scores(predictions: &[Option<bool>], golds: &[bool]) -> Result<PopeScores> {
    if predictions.len() != golds.len() {
        return Err(VtiError::dim(format!(
            "{} predictions but {} gold answers",
            predictions.len(),
            golds.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    let mut unparseable = 0;
    for (&p, &g) in predictions.iter().zip(golds) {
        // a missing answer counts as the wrong one
        let p = p.unwrap_or_else(|| {
            unparseable += 1;
            !g
        });
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PopeScores {
        accuracy: ratio(tp + tn, golds.len()),
        precision,
        recall,
        f1,
        unparseable,
        undefined_precision: tp + fp == 0,
        undefined_recall: tp + fn_ == 0,
    })
}
