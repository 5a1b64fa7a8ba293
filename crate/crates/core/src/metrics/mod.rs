//! Evaluation quantities: CHAIR, POPE scores, feature stability, attention
//! mass, the linear probe and generation length.

mod attention;
mod chair;
mod pope;
mod probe;
mod report;
mod stability;

pub use attention::{attention_dependency, AttentionMass};
pub use chair::{chair_scores, chair_scores_with, ChairScores, MentionCounting};
pub use pope::{parse_answer, pope_scores, PopeScores};
pub use probe::{linear_probe, probe_loss_and_gradient, ProbeOptions, ProbeResult};
pub use report::EvalReport;
pub use stability::{
    stability_report, summarize, KindStability, StabilityBlock, VarianceHistogram, HISTOGRAM_BINS,
    HISTOGRAM_LOG10_RANGE, TAIL_FACTOR,
};

use crate::vocab::{Token, EOS};

/// Mean number of tokens before the first EOS.
pub fn avg_generation_length<T: AsRef<[Token]>>(generations: &[T]) -> f64 {
    if generations.is_empty() {
        return 0.0;
    }
    let total: usize = generations
        .iter()
        .map(|g| {
            let g = g.as_ref();
            g.iter().position(|&t| t == EOS).unwrap_or(g.len())
        })
        .sum();
    total as f64 / generations.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths() {
        assert_eq!(avg_generation_length::<Vec<Token>>(&[]), 0.0);
        assert_eq!(avg_generation_length(&[vec![EOS], vec![]]), 0.0);
        assert_eq!(avg_generation_length(&[vec![6, 7], vec![6, 7, 8, 9, EOS, 4]]), 3.0);
    }
}
