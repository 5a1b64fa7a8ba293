use serde::{Deserialize, Serialize};

use crate::error::{Result, VtiError};
use crate::model::GenerationTrace;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionMass {
    pub vision: f64,
    pub text: f64,
}

/// Mean attention mass that generated-token rows put on the first
/// `vision_tokens` keys versus the rest, averaged over every step, layer
/// and head of every trace.
pub fn attention_dependency(traces: &[&GenerationTrace], vision_tokens: usize) -> Result<AttentionMass> {
    let (mut vision, mut total, mut rows) = (0.0f64, 0.0f64, 0usize);
    for trace in traces {
        for step in &trace.steps {
            let k = *step.attention.shape().last().unwrap_or(&0);
            if k < vision_tokens {
                return Err(VtiError::dim(format!("{k} keys but {vision_tokens} vision tokens")));
            }
            for row in step.attention.data().chunks_exact(k) {
                let v: f64 = row[..vision_tokens].iter().map(|&p| f64::from(p)).sum();
                let all: f64 = row.iter().map(|&p| f64::from(p)).sum();
                vision += v;
                total += all;
                rows += 1;
            }
        }
    }
    if rows == 0 {
        return Err(VtiError::Generation("no generated tokens to average attention over".into()));
    }
    // normalize by the summed mass so the two parts add to one exactly
    let vision = vision / total;
    Ok(AttentionMass {
        vision,
        text: 1.0 - vision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HookSet, ModelConfig, ToyLvlm};
    use crate::perturb::Image;

    #[test]
    fn single_step_matches_direct_average() {
        let c = ModelConfig::tiny();
        let m = ToyLvlm::init(c, 3).unwrap();
        let img = Image::filled(c.image_size, c.image_size, [0.2, 0.5, 0.9]).unwrap();
        let g = m.generate(&img, &[1, 3], &HookSet::new(), 1).unwrap();
        assert_eq!(g.trace.steps.len(), 1);
        let got = attention_dependency(&[&g.trace], c.vision_tokens()).unwrap();
        let att = &g.trace.steps[0].attention;
        let k = att.shape()[2];
        let rows = att.data().len() / k;
        let direct: f64 = att
            .data()
            .chunks(k)
            .map(|r| r[..c.vision_tokens()].iter().map(|&p| f64::from(p)).sum::<f64>())
            .sum::<f64>()
            / rows as f64;
        assert!((got.vision - direct).abs() < 1e-6);
        assert!((got.vision + got.text - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_generation_is_an_error() {
        assert!(attention_dependency(&[], 4).is_err());
    }
}
